"""Run configuration: a flat key = value text format.

Lines are ``key = value``; '#' starts a comment; blank lines are ignored.
List-valued keys take comma-separated entries.  Both parties must agree on
every protocol-relevant key; the handshake compares fingerprints of that
subset and aborts the run on mismatch.
"""

import hashlib
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .secure import DEFAULT_MASK_RANGE

ROLES = ("local", "active", "passive")


@dataclass
class RunConfig:
    # topology
    role: str = "local"
    n_workers: int = 1
    backend: str = "thread"          # thread | process (process: bench scaling)
    host: str = "127.0.0.1"
    port: int = 29500

    # privacy layer
    he: str = "off"                  # off | on
    key_bits: int = 128
    frac_bits: int = 16
    mask_range: float = DEFAULT_MASK_RANGE

    # set intersection
    fp_target: float = 1e-6
    sigma: int = 128

    # model
    active_bottom: list = field(default_factory=lambda: [32, 16])
    passive_bottom: list = field(default_factory=lambda: [32, 16])
    interactive_out: int = 32
    top: list = field(default_factory=lambda: [16])
    bottom_activation: str = "relu"
    top_activation: str = "relu"

    # optimisation
    lr: float = 0.05
    batch_size: int = 16
    epochs: int = 10
    seed: int = 1234
    sync_every: str = "batch"        # batch | epoch
    stop_kind: str = "epochs"        # epochs | loss_below
    loss_threshold: float = 0.0

    # data
    active_data: str = ""
    passive_data: str = ""
    input: str = ""                  # joined LIBSVM file (convenience path)
    active_cols: str = ""
    n_features: int = 0
    replicate: int = 1

    # outputs
    checkpoint_out: str = ""
    metrics_out: str = ""

    def validate(self):
        if self.role not in ROLES:
            raise ConfigError("role must be one of %s" % (ROLES,))
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")
        if self.he not in ("off", "on"):
            raise ConfigError("he must be off or on")
        if self.sync_every not in ("batch", "epoch"):
            raise ConfigError("sync_every must be batch or epoch")
        if self.stop_kind not in ("epochs", "loss_below"):
            raise ConfigError("stop_kind must be epochs or loss_below")
        if self.backend not in ("thread", "process"):
            raise ConfigError("backend must be thread or process")
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ConfigError("batch_size/epochs must be positive, lr > 0")
        if self.frac_bits < 1 or self.sigma % 8:
            raise ConfigError("frac_bits must be >= 1 and sigma a multiple of 8")
        return self

    # keys whose disagreement between parties would corrupt the run
    _NEGOTIATED = ("n_workers", "he", "key_bits", "frac_bits", "mask_range",
                   "fp_target", "sigma", "active_bottom", "passive_bottom",
                   "interactive_out", "top", "bottom_activation",
                   "top_activation", "lr", "batch_size", "epochs", "seed",
                   "sync_every", "stop_kind", "loss_threshold", "replicate")

    def negotiation_fingerprint(self):
        parts = ["%s=%r" % (k, getattr(self, k)) for k in self._NEGOTIATED]
        return hashlib.sha256("|".join(parts).encode()).digest()

    def arch(self):
        from .nn import ModelArch
        return ModelArch(list(self.active_bottom), list(self.passive_bottom),
                         self.interactive_out, list(self.top),
                         self.bottom_activation, self.top_activation)


def _coerce(name, raw, like):
    try:
        if isinstance(like, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, list):
            return [int(t) for t in raw.split(",") if t.strip() != ""]
        return raw
    except ValueError:
        raise ConfigError("bad value %r for key %r" % (raw, name))


def parse_config_text(text, base=None):
    cfg = base if base is not None else RunConfig()
    defaults = {f.name: getattr(RunConfig(), f.name) for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected key = value, got %r" % (lineno, line))
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError("line %d: unknown key %r" % (lineno, key))
        setattr(cfg, key, _coerce(key, raw, defaults[key]))
    return cfg.validate()


def load_config(path, base=None):
    with open(path, "r") as fh:
        return parse_config_text(fh.read(), base)
