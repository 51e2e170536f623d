"""Published reference numbers used as regression fixtures."""
from __future__ import annotations

import json
from pathlib import Path

# Test-set metrics per backbone, in the published row order:
# (accuracy, precision, recall, f1, auc)
PUBLISHED_METRICS = {
    "EfficientNetB0": (0.46219, 0.46219, 1.00000, 0.63218, 0.33122),
    "EfficientNetV2B0": (0.46219, 0.46219, 1.00000, 0.63218, 0.63435),
    "MobileNet": (0.54307, 0.50287, 0.99546, 0.66819, 0.93268),
    "ConvNeXtTiny": (0.46219, 0.46219, 1.00000, 0.63218, 0.50726),
    "ResNet50": (0.92542, 0.87885, 0.97273, 0.92341, 0.99033),
    "VGG16": (0.93487, 0.91087, 0.95227, 0.93111, 0.98431),
    "NASNetMobile": (0.95798, 0.93290, 0.97955, 0.95565, 0.99619),
    "MobileNetV2": (0.97370, 0.96874, 0.97773, 0.97321, 0.97990),
    "DenseNet121": (0.98004, 0.96882, 0.98864, 0.97863, 0.99830),
}

# DenseNet121 test-set confusion counts (952 images).
DENSENET121_CONFUSION = {"tp": 428, "tn": 497, "fp": 15, "fn": 12}


def published_claims(model: str) -> dict[str, float]:
    acc, prec, rec, f1, auc = PUBLISHED_METRICS[model]
    return {"accuracy": acc, "precision": prec, "recall": rec, "f1": f1, "auc": auc}


def write_published_reports(reports_dir: str | Path) -> list[Path]:
    """Store each published row as ``<reports_dir>/<model>/metrics.json``."""
    paths = []
    for sequence, model in enumerate(PUBLISHED_METRICS):
        out = Path(reports_dir) / model
        out.mkdir(parents=True, exist_ok=True)
        record = {"model": model, "sequence": sequence, **published_claims(model),
                  "provenance": {"source": "published"}}
        path = out / "metrics.json"
        path.write_text(json.dumps(record, indent=2))
        paths.append(path)
    return paths
