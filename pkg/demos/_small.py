"""Shared small run configuration for the demos (a minute or two of training)."""

from atrg.config import config_from_dict

SMALL = {
    "seed": 3,
    "attribution_limit": 120,
    "task": {"n_train": 1200, "n_valid": 80, "n_test": 160},
    "model": {"d_model": 32, "enc_layers": 1, "dec_layers": 1, "heads": 2, "ff_dim": 64},
    "train": {"max_epochs": 10, "lr": 3e-3, "warmup_steps": 80},
    "finetune": {"max_epochs": 1, "attr_fraction": 0.25},
    "perturb": {"positions": [0, 1, 2, 3, 4], "max_sentences": 60},
}


def small_config(**overrides):
    d = {k: (dict(v) if isinstance(v, dict) else v) for k, v in SMALL.items()}
    for k, v in overrides.items():
        if isinstance(v, dict):
            d.setdefault(k, {}).update(v)
        else:
            d[k] = v
    return config_from_dict(d)
