"""Text formats: network weights, certificates, run configs and CSV tables.

Every file is written atomically (temporary file in the target directory,
then ``os.replace``).  Floats are written as their shortest round-trip
decimal, so saving a loaded file reproduces it byte for byte.
"""
from __future__ import annotations

import dataclasses
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .nn import Mlp
from .verifier import MODES, Certificate


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    atomic_write(path, "\n".join(lines) + "\n")


def read_csv(path: str):
    """Header list and rows of strings (no quoting support, matching :func:`write_csv`)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    return lines[0].split(","), [ln.split(",") for ln in lines[1:] if ln]


# -- weights ----------------------------------------------------------------

def weights_to_text(net: Mlp) -> str:
    lines = [" ".join(str(s) for s in net.sizes)]
    for w, b in zip(net.weights, net.biases):
        lines += [" ".join(repr(float(v)) for v in row) for row in w]
        lines.append(" ".join(repr(float(v)) for v in b))
    return "\n".join(lines) + "\n"


def _floats(line: str, n: int, lineno: int) -> List[float]:
    parts = line.split()
    if len(parts) != n:
        raise ParseError(f"expected {n} numbers, found {len(parts)}", lineno)
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ParseError(f"not a number in {line.strip()!r}", lineno) from None
    if not all(np.isfinite(vals)):
        raise ParseError("non-finite parameter", lineno)
    return vals


def weights_from_lines(lines: List[str], first_lineno: int = 1) -> Mlp:
    if not lines or not lines[0].strip():
        raise ParseError("missing architecture header", first_lineno)
    try:
        sizes = [int(s) for s in lines[0].split()]
    except ValueError:
        raise ParseError(f"bad architecture header {lines[0].strip()!r}", first_lineno) from None
    if len(sizes) < 2 or min(sizes) < 1:
        raise ParseError("architecture needs at least two positive layer sizes", first_lineno)
    pos = 1
    ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        rows = []
        for _ in range(n_out):
            if pos >= len(lines):
                raise ParseError("file ends inside a weight matrix", first_lineno + pos)
            rows.append(_floats(lines[pos], n_in, first_lineno + pos))
            pos += 1
        if pos >= len(lines):
            raise ParseError("file ends before a bias row", first_lineno + pos)
        bs.append(_floats(lines[pos], n_out, first_lineno + pos))
        pos += 1
        ws.append(rows)
    extra = [i for i in range(pos, len(lines)) if lines[i].strip()]
    if extra:
        raise ParseError("unexpected content after the last layer", first_lineno + extra[0])
    return Mlp([np.array(w) for w in ws], [np.array(b) for b in bs])


def save_weights(net: Mlp, path: str) -> None:
    atomic_write(path, weights_to_text(net))


def load_weights(path: str) -> Mlp:
    with open(path, encoding="utf-8") as fh:
        return weights_from_lines(fh.read().splitlines())


# -- certificates -----------------------------------------------------------

_CERT_FLOATS = ("m", "eps", "K", "tau", "L_V", "L_f", "L_pi", "min_mesh", "slack")
_CERT_INTS = ("seed", "k", "grid_size", "refined_points", "iterations")
_CERT_HEADER = "# rsmcert certificate v1"


def certificate_to_text(cert: Certificate) -> str:
    """Self-describing document; wall time is left out so reruns are byte-identical."""
    lines = [_CERT_HEADER, f"benchmark={cert.benchmark}",
             "architecture=" + " ".join(str(s) for s in cert.network.sizes)]
    lines += [f"{k}={fmt(getattr(cert, k))}" for k in _CERT_INTS]
    lines += [f"{k}={fmt(getattr(cert, k))}" for k in _CERT_FLOATS]
    lines.append("[weights]")
    return "\n".join(lines) + "\n" + weights_to_text(cert.network)


def certificate_from_text(text: str) -> Certificate:
    lines = text.splitlines()
    if not lines or lines[0].strip() != _CERT_HEADER:
        raise ParseError("not a certificate file", 1)
    fields = {}
    for i, line in enumerate(lines[1:], start=2):
        if line.strip() == "[weights]":
            net = weights_from_lines(lines[i:], first_lineno=i + 1)
            break
        key, sep, val = line.partition("=")
        if not sep:
            raise ParseError(f"expected key=value, got {line.strip()!r}", i)
        fields[key.strip()] = (val.strip(), i)
    else:
        raise ParseError("missing [weights] section", len(lines))
    kw = {"network": net}
    for k in _CERT_FLOATS + _CERT_INTS:
        if k not in fields:
            raise ParseError(f"missing field {k!r}", len(lines))
        val, ln = fields[k]
        try:
            kw[k] = int(val) if k in _CERT_INTS else float(val)
        except ValueError:
            raise ParseError(f"bad value for {k!r}: {val!r}", ln) from None
    kw["benchmark"] = fields.get("benchmark", ("", 0))[0]
    arch = fields.get("architecture", ("", 0))
    if arch[0] and [int(s) for s in arch[0].split()] != net.sizes:
        raise ParseError("architecture line does not match the weights", arch[1])
    return Certificate(**kw)


def save_certificate(cert: Certificate, path: str) -> None:
    atomic_write(path, certificate_to_text(cert))


def load_certificate(path: str) -> Certificate:
    with open(path, encoding="utf-8") as fh:
        return certificate_from_text(fh.read())


# -- run configuration ------------------------------------------------------

def _floats_list(s: str) -> List[float]:
    return [float(v) for v in s.replace(",", " ").split()]


def _ints_list(s: str) -> List[int]:
    return [int(v) for v in s.replace(",", " ").split()]


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(s)


@dataclass
class RunConfig:
    """Flat ``key=value`` run configuration.  Lists are comma separated."""

    benchmark: str = "2d-system"
    policy: str = "analytic"          # "analytic" or a weights file path
    policy_gain: str = ""             # "k1,k2" overrides the built-in gains
    noise_scale: float = 1.0          # multiplies the disturbance; 0 gives deterministic runs
    seed: int = 0
    out: str = "out"
    # learner
    lam: float = 0.0005
    delta: float = 4.0
    learning_rate: float = 0.0001
    n_samples: int = 20
    epochs: int = 2000
    learner_tau: float = 0.1
    batch_size: int = 0               # 0 means full batch
    hidden: str = "128"
    # verifier
    verifier_tau: float = 0.01
    k: int = 16
    timeout: float = 3600.0           # seconds; negative means no limit
    refinement: str = "both"
    slack: float = 1e-9
    max_iterations: int = 0           # 0 means until timeout
    # experiments
    certificate: str = ""
    random_v: bool = False
    bound_states: int = 100
    bound_ks: str = "4,8,16,32,64"
    mc_samples: int = 1000
    runs: int = 1000
    x0: str = "0.4,0.3"
    steps: int = 200
    trajectories: int = 20
    tail_ts: str = "10,50,100,500"
    contour_resolution: int = 101

    _positive = ("delta", "learning_rate", "learner_tau", "verifier_tau", "n_samples", "k",
                 "mc_samples", "runs", "bound_states", "trajectories")
    _nonneg = ("lam", "noise_scale", "epochs", "batch_size", "slack", "max_iterations", "steps")

    def validate(self) -> "RunConfig":
        for k in self._positive:
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        for k in self._nonneg:
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be nonnegative")
        if self.refinement not in MODES:
            raise ConfigError(f"refinement must be one of {', '.join(MODES)}")
        if self.contour_resolution < 2:
            raise ConfigError("contour_resolution must be at least 2")
        for key, conv in (("hidden", _ints_list), ("bound_ks", _ints_list), ("tail_ts", _ints_list),
                          ("x0", _floats_list), ("policy_gain", _floats_list)):
            try:
                conv(getattr(self, key))
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {getattr(self, key)!r}") from None
        if not _ints_list(self.hidden) or min(_ints_list(self.hidden)) < 1:
            raise ConfigError("hidden must list positive layer widths")
        return self

    # typed views
    @property
    def hidden_sizes(self):
        return tuple(_ints_list(self.hidden))

    @property
    def ks(self):
        return _ints_list(self.bound_ks)

    @property
    def ts(self):
        return _ints_list(self.tail_ts)

    @property
    def x0_vec(self):
        return np.array(_floats_list(self.x0))

    @property
    def gain(self):
        g = _floats_list(self.policy_gain)
        return [g] if g else None


def _config_fields():
    return [f for f in dataclasses.fields(RunConfig) if not f.name.startswith("_")]


def parse_config(text: str, source: str = "config") -> RunConfig:
    cfg = RunConfig()
    types = {f.name: type(f.default) for f in _config_fields()}
    seen = set()
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ConfigError(f"{source}:{i}: expected key=value, got {raw.strip()!r}")
        if key not in types:
            raise ConfigError(f"{source}:{i}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{i}: duplicate key {key!r}")
        seen.add(key)
        t = types[key]
        try:
            value = _bool(val) if t is bool else int(val) if t is int else float(val) if t is float else val
        except ValueError:
            raise ConfigError(f"{source}:{i}: bad value for {key!r}: {val!r}") from None
        setattr(cfg, key, value)
    try:
        return cfg.validate()
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None


def config_to_text(cfg: RunConfig) -> str:
    return "".join(f"{f.name}={fmt(getattr(cfg, f.name))}\n" for f in _config_fields())


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, source=path)


def optional_int(v: int) -> Optional[int]:
    return None if v == 0 else v
