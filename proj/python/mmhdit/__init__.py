"""Diffusion transformer with per-block head counts, flow-matching training,
and the data pipeline around it. Thin wrappers over the C++ core."""

import json

from . import _core
from ._core import ConfigError, DiT, Error, IntegrityError, head_schedule_default, patchify, score_bucket, unpatchify

__all__ = [
    "ConfigError",
    "DiT",
    "Error",
    "IntegrityError",
    "Trainer",
    "cli",
    "dedup",
    "desk_config",
    "head_schedule_default",
    "interpolate",
    "load_model",
    "paper_scale_config",
    "patchify",
    "score_bucket",
    "stage_resize",
    "unpatchify",
    "validate_config",
]


def desk_config():
    return json.loads(_core.desk_config())


def paper_scale_config():
    return json.loads(_core.paper_scale_config())


def validate_config(config):
    """Returns the config with defaults filled in; raises ConfigError naming the bad field."""
    return json.loads(_core.validate_config(json.dumps(config)))


def model(config, seed=0):
    """A freshly initialised model from a training config or its "model" section."""
    section = config.get("model", config)
    return DiT(json.dumps(section), seed)


def load_model(path):
    return _core.load_model(str(path))


def interpolate(x1, x0, t):
    """(xt, target) for the straight path xt = t x1 + (1 - t) x0."""
    return _core.interpolate(x1, x0, list(t))


def stage_resize(width, height, stage, seed=0):
    return json.loads(_core.stage_resize(width, height, stage, seed))


def dedup(ids, embeddings, **config):
    return json.loads(_core.dedup(list(ids), embeddings, json.dumps(config)))


class Trainer:
    def __init__(self, config, _inner=None):
        self.config = config
        self._inner = _inner or _core.Trainer(json.dumps(config))

    @classmethod
    def resume(cls, config, checkpoint):
        return cls(config, _core.Trainer.resume(json.dumps(config), str(checkpoint)))

    def train(self, steps):
        """Runs up to `steps` optimizer steps; returns one metrics dict per step."""
        return [json.loads(r) for r in self._inner.train(steps)]

    @property
    def finished(self):
        return self._inner.finished

    @property
    def state(self):
        return json.loads(self._inner.state_json)

    @property
    def model(self):
        return self._inner.model()

    def save_checkpoint(self, path):
        self._inner.save_checkpoint(str(path))


def cli(*args):
    """Runs the command-line tool in-process: (exit_code, stdout, stderr)."""
    return _core.cli_run([str(a) for a in args])
