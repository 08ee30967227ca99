"""Per-dataset hyperparameter presets used by the CLI and the acceptance runs.

Keys match the ``train`` flags (dashes replaced by underscores). Citation
graphs use the CkNN rule and synthetic graphs use kNN.
"""

DEFAULTS = {
    "model": "lgd",
    "M": 4,
    "T": 7,
    "layers": 2,
    "d_out": 64,
    "hidden": 64,
    "k": 5,
    "rule": "knn",
    "lgagg": True,
    "dropout": 0.5,
    "lr": 0.01,
    "weight_decay": 5e-4,
    "update_rate": 0.5,
    "lambda_space": 0.3,
    "lambda_div": 0.01,
    "epochs": 1000,
    "patience": 100,
}

PRESETS = {
    "synth4": {
        "layers": 1, "T": 2, "rule": "knn", "k": 5, "dropout": 0.0,
        "lr": 0.05, "weight_decay": 0.0, "update_rate": 0.5,
        "lambda_space": 0.01, "lambda_div": 0.01,
        "epochs": 300, "patience": 300,
    },
    "cora": {
        "layers": 2, "rule": "cknn", "k": 4, "dropout": 0.6,
        "lr": 0.01, "weight_decay": 5e-4, "update_rate": 0.5,
        "lambda_space": 0.3, "lambda_div": 0.01,
    },
    "citeseer": {
        "layers": 2, "rule": "cknn", "k": 4, "dropout": 0.6,
        "lr": 0.01, "weight_decay": 5e-4, "update_rate": 0.5,
        "lambda_space": 0.3, "lambda_div": 0.05,
    },
    "pubmed": {
        "layers": 2, "rule": "cknn", "k": 4, "dropout": 0.5,
        "lr": 0.01, "weight_decay": 5e-4, "update_rate": 0.5,
        "lambda_space": 0.3, "lambda_div": 0.01,
    },
}

# settings for the plain GCN compared against each preset, applied when model is gcn
BASELINES = {
    "synth4": {"layers": 2, "hidden": 64, "dropout": 0.5, "lr": 0.02, "weight_decay": 5e-4},
}


def resolve(preset: str | None, overrides: dict) -> dict:
    """Defaults, then the preset, then (for the gcn model) the preset's baseline, then explicit overrides."""
    out = dict(DEFAULTS)
    given = {k: v for k, v in overrides.items() if v is not None}
    if preset is not None:
        if preset not in PRESETS:
            raise KeyError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        out.update(PRESETS[preset])
        if given.get("model", out["model"]) == "gcn":
            out.update(BASELINES.get(preset, {}))
    out.update(given)
    return out
