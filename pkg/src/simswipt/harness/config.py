"""Flat key = value experiment configuration with dotted namespaces.

The file format is deliberately primitive: UTF-8 text, one `key = value`
per line, `#` comments, no sections, no quoting.  Every key has a typed
default below, so a config file only lists deviations and the resolved
configuration is always total.  The canonical serialization (all keys in
table order) feeds a SHA-256 hash that tags every output artifact.

Randomness is splittable without coordination: `substream(seed, *path)`
derives an independent generator from the master seed and an integer path
(realization index, role index, ...) through numpy's SeedSequence spawn
keys, so any cell of a sweep can rebuild its exact stream in isolation.
"""

import hashlib

import numpy as np

from .. import channel as _channel
from .. import performance as _performance


class ConfigError(ValueError):
    """Unknown key, malformed line, or a value of the wrong type."""


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optfloat(text):
    low = text.strip().lower()
    if low in ("none", "off"):
        return None
    return float(text)


_PARSERS = {
    "int": int,
    "float": float,
    "str": lambda s: s.strip(),
    "bool": _parse_bool,
    "optfloat": _parse_optfloat,
}

# key -> (type name, default); table order defines the canonical order
DEFAULTS = {
    # network layout over the service square
    "topo.m": ("int", 4),
    "topo.k_i": ("int", 3),
    "topo.k_e": ("int", 4),
    "topo.area": ("float", 100.0),        # side of the square, meters
    "topo.ap_height": ("float", 15.0),    # meters
    "topo.rx_height": ("float", 1.65),    # meters
    "topo.kappa": ("float", 3.0),         # Ricean factor of every link
    # metasurface stack and feed array
    "geom.s": ("int", 16),
    "geom.l": ("int", 2),
    "geom.n": ("int", 32),
    "geom.wavelength": ("float", 1.0),
    "geom.thickness": ("float", 4.0),     # total depth, wavelengths
    # pilot assignment
    "pilots.reuse_ir": ("int", 0),
    "pilots.reuse_er": ("int", 0),
    # block structure, physical powers, harvester circuit
    "sys.tau_c": ("int", 200),
    "sys.sigma_n2_dbm": ("float", -92.0),
    "sys.rho_d_w": ("float", 1.0),
    "sys.rho_u_w": ("float", 0.2),
    "sys.xi": ("float", 150.0),
    "sys.chi": ("float", 0.024),
    "sys.phi": ("float", 0.024),
    "sys.qos_se": ("optfloat", None),
    "sys.qos_energy": ("optfloat", None),
    # phase policy x resource allocator
    "policy.phase": ("str", "hps"),
    "policy.alloc": ("str", "rapepa"),
    "policy.hps_candidates": ("int", 20),
    # allocator knobs
    "alloc.mode_count": ("int", -1),      # -1: half the APs serve data
    "alloc.delta": ("int", 2),
    "alloc.lam_pen": ("float", 10.0),
    # learning allocators
    "train.episodes": ("int", 40),
    "train.steps": ("int", 50),
    "train.actor_lr": ("float", 1e-4),
    "train.critic_lr": ("float", 5e-3),
    "train.lam_tradeoff": ("float", 0.5),
    "train.lam_se": ("float", 1.0),
    "train.noise_scale": ("float", 0.3),
    "train.noise_decay": ("float", 1e-4),
    "train.noise_floor": ("float", 0.02),
    # orchestration
    "run.trials": ("int", 1000),
    "run.realizations": ("int", 50),
    "run.seed": ("int", 1),
    "run.workers": ("int", 1),
    "run.policies": ("str", ""),          # comma list of phase+alloc combos
}

_PHASES = ("rdps", "eqps", "hps")
_ALLOCATORS = ("rapepa", "jappa", "ctde", "ctce")


class ExperimentConfig:
    """Resolved configuration: every key present, typed, hashable."""

    def __init__(self, values=None):
        self._values = {key: default for key, (_, default) in DEFAULTS.items()}
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self._values[key] = value
        if self._values["policy.phase"] not in _PHASES:
            raise ConfigError(f"policy.phase must be one of {_PHASES}")
        if self._values["policy.alloc"] not in _ALLOCATORS:
            raise ConfigError(f"policy.alloc must be one of {_ALLOCATORS}")

    def get(self, key):
        return self._values[key]

    def replace(self, **overrides):
        """New config with dotted keys given as key=value (dots as __)."""
        values = dict(self._values)
        for name, value in overrides.items():
            key = name.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        return ExperimentConfig(values)

    def canonical_text(self):
        lines = []
        for key in DEFAULTS:
            value = self._values[key]
            if isinstance(value, float):
                text = repr(value)
            elif value is None:
                text = "none"
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self):
        digest = hashlib.sha256(self.canonical_text().encode()).hexdigest()
        return digest[:16]

    # --- domain object builders ---

    def geometry(self):
        lam = self.get("geom.wavelength")
        return _channel.SimGeometry(
            num_elements=self.get("geom.s"),
            num_layers=self.get("geom.l"),
            num_antennas=self.get("geom.n"),
            wavelength=lam,
            thickness=self.get("geom.thickness") * lam,
        )

    @property
    def sigma_n2_watts(self):
        return 10.0 ** ((self.get("sys.sigma_n2_dbm") - 30.0) / 10.0)

    def system_params(self, tau):
        noise = self.sigma_n2_watts
        return _performance.SystemParams(
            tau_c=self.get("sys.tau_c"),
            tau=tau,
            rho_d=self.get("sys.rho_d_w") / noise,
            rho_u=self.get("sys.rho_u_w") / noise,
            sigma_n2=noise,
            xi=self.get("sys.xi"),
            chi=self.get("sys.chi"),
            phi=self.get("sys.phi"),
            qos_se=self.get("sys.qos_se"),
            qos_energy=self.get("sys.qos_energy"),
        )

    def policy_combos(self):
        """The phase+alloc pairs a sweep compares."""
        listed = self.get("run.policies").strip()
        if not listed:
            return [f"{self.get('policy.phase')}+{self.get('policy.alloc')}"]
        combos = []
        for item in listed.split(","):
            name = item.strip()
            phase, _, alloc = name.partition("+")
            if phase not in _PHASES or alloc not in _ALLOCATORS:
                raise ConfigError(f"bad policy combo {name!r}")
            combos.append(name)
        return combos


def parse_config_text(text):
    """Parse `key = value` lines into an ExperimentConfig."""
    values = {}
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        type_name, _ = DEFAULTS[key]
        try:
            values[key] = _PARSERS[type_name](raw.strip())
        except ValueError as err:
            raise ConfigError(f"line {lineno}: bad {type_name} value: {err}")
    return ExperimentConfig(values)


def load_config(path):
    with open(path, encoding="utf-8") as handle:
        return parse_config_text(handle.read())


def substream(master_seed, *path):
    """Independent generator for (master seed, integer path).

    SeedSequence hashes the entropy and the spawn key together, so streams
    for different paths never collide and any one of them can be rebuilt
    from its coordinates alone.
    """
    seq = np.random.SeedSequence(
        entropy=int(master_seed),
        spawn_key=tuple(int(p) for p in path),
    )
    return np.random.default_rng(seq)
