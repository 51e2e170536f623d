"""Transfer-learning benchmark harness for chest imaging classifiers."""
__version__ = "0.1.0"
