"""Model configuration, Brownian path layering, wealth simulation and utilities.

Conventions: volatilities are identically 1, the time grid is uniform with
``t_k = k T / n_steps``, and return rates are deterministic functions of
``(t, type_label)``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import kernels


class ConfigError(ValueError):
    """Invalid or inconsistent game configuration."""


RETURN_MODELS = ("constant", "sinusoidal", "type_dependent")


@dataclass(frozen=True)
class PlayerSpec:
    alpha: float
    theta: float
    x0: float = 0.0
    type_label: int = 0

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not (0.0 <= self.theta < 1.0):
            raise ConfigError(f"theta must lie in [0, 1), got {self.theta}")
        if not math.isfinite(self.x0):
            raise ConfigError(f"x0 must be finite, got {self.x0}")
        if int(self.type_label) != self.type_label or self.type_label < 0:
            raise ConfigError(f"type_label must be a nonnegative integer, got {self.type_label}")


@dataclass(frozen=True)
class ReturnSpec:
    """Return rates b(t, label) and b0(t, label) with declared sup bounds."""

    model: str
    b: Callable
    b0: Callable
    bound_b: float
    bound_b0: float
    params: dict = field(default_factory=dict, compare=False)

    def grid(self, times, labels):
        """Evaluate (b, b0) on ``times`` for each label -> two arrays [len(labels), len(times)]."""
        times = np.asarray(times, dtype=float)
        bb = np.array([np.broadcast_to(self.b(times, int(l)), times.shape) for l in labels], dtype=float)
        bb0 = np.array([np.broadcast_to(self.b0(times, int(l)), times.shape) for l in labels], dtype=float)
        return bb.reshape(len(labels), -1), bb0.reshape(len(labels), -1)

    def check_bounds(self, times, labels, slack=1e-12):
        bb, bb0 = self.grid(times, labels)
        if np.any(np.abs(bb) > self.bound_b + slack) or np.any(np.abs(bb0) > self.bound_b0 + slack):
            raise ConfigError("return rates exceed their declared bounds on the grid")


def _per_label(value, n_labels, name):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        return np.repeat(arr, n_labels)
    if arr.size < n_labels:
        raise ConfigError(f"'{name}' needs {n_labels} entries, got {arr.size}")
    return arr


def make_returns(model: str, params: dict, n_labels: int, T: float) -> ReturnSpec:
    """Build a named return model.

    Args:
        model: one of ``constant``, ``sinusoidal``, ``type_dependent``.
        params: ``b``, ``b0`` (scalar or per-label lists); ``sinusoidal`` also reads
            ``amp_b``, ``amp_b0`` and ``freq`` (cycles over the horizon).
        n_labels: number of type labels that must be covered.
        T: horizon, used by the sinusoidal model.

    Returns:
        ReturnSpec.

    Raises:
        ConfigError: unknown model or malformed parameters.
    """
    if model not in RETURN_MODELS:
        raise ConfigError(f"unknown return_model '{model}' (expected one of {RETURN_MODELS})")
    b_lvl = _per_label(params.get("b", 0.0), n_labels, "b")
    b0_lvl = _per_label(params.get("b0", 0.0), n_labels, "b0")
    if model == "constant" and (np.ptp(b_lvl) > 0 or np.ptp(b0_lvl) > 0):
        raise ConfigError("constant return model takes scalar b and b0; use type_dependent")
    amp_b = float(params.get("amp_b", 0.0)) if model == "sinusoidal" else 0.0
    amp_b0 = float(params.get("amp_b0", 0.0)) if model == "sinusoidal" else 0.0
    freq = float(params.get("freq", 1.0))

    def b(t, label):
        t = np.asarray(t, dtype=float)
        return b_lvl[label] + amp_b * np.sin(2.0 * np.pi * freq * t / T)

    def b0(t, label):
        t = np.asarray(t, dtype=float)
        return b0_lvl[label] + amp_b0 * np.cos(2.0 * np.pi * freq * t / T)

    clean = {"b": b_lvl.tolist(), "b0": b0_lvl.tolist()}
    if model == "sinusoidal":
        clean.update(amp_b=amp_b, amp_b0=amp_b0, freq=freq)
    return ReturnSpec(
        model=model,
        b=b,
        b0=b0,
        bound_b=float(np.max(np.abs(b_lvl)) + abs(amp_b)),
        bound_b0=float(np.max(np.abs(b0_lvl)) + abs(amp_b0)),
        params=clean,
    )


@dataclass(frozen=True)
class GameConfig:
    """Single source of model truth.

    In ``nplayer`` mode ``players`` lists the N players. ``types``/``probs``
    optionally declare the population law used for conditional mean-field terms;
    without them the empirical law of the players is used. In ``mfg`` mode the
    representative player's type law is ``types``/``probs``.
    """

    T: float
    n_steps: int
    mode: str
    returns: ReturnSpec
    players: tuple = ()
    types: tuple = ()
    probs: tuple = ()
    seed: int = 0
    theta_noise_amp: float = 0.0
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigError(f"horizon must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps}")
        if self.mode not in ("nplayer", "mfg"):
            raise ConfigError(f"mode must be 'nplayer' or 'mfg', got {self.mode}")
        if self.mode == "nplayer" and len(self.players) < 2:
            raise ConfigError("nplayer mode needs at least 2 players")
        if self.mode == "mfg" and not self.types:
            raise ConfigError("mfg mode needs a type distribution")
        if self.types:
            if len(self.probs) != len(self.types):
                raise ConfigError("types and probs must have the same length")
            p = np.asarray(self.probs, dtype=float)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ConfigError(f"type probabilities must be nonnegative and sum to 1, got {self.probs}")
        if not (0.0 <= self.theta_noise_amp) or any(
            t.theta + self.theta_noise_amp >= 1.0 for t in self.types
        ):
            raise ConfigError("theta_noise_amp must keep theta inside [0, 1)")
        if any(t.theta < self.theta_noise_amp for t in self.types):
            raise ConfigError("theta_noise_amp must not exceed the type's theta")
        labels = self.labels
        self.returns.check_bounds(self.times, labels)

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @property
    def N(self) -> int:
        return len(self.players)

    @property
    def labels(self) -> list:
        return sorted({p.type_label for p in self.players} | {t.type_label for t in self.types})

    def return_grid(self, labels=None):
        """(b, b0) at the left grid points, arrays [len(labels), n_steps]."""
        labels = self.labels if labels is None else labels
        return self.returns.grid(self.times[:-1], labels)

    def player_returns(self):
        """(b, b0) per player, arrays [N, n_steps]."""
        return self.return_grid([p.type_label for p in self.players])

    def replace(self, **kw) -> "GameConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "horizon": self.T,
            "n_steps": self.n_steps,
            "seed": self.seed,
            "return_model": self.returns.model,
            "returns": dict(self.returns.params),
        }
        if self.players:
            d["players"] = [dataclasses.asdict(p) for p in self.players]
        if self.types:
            d["types"] = [dataclasses.asdict(t) for t in self.types]
            d["probs"] = list(self.probs)
        if self.theta_noise_amp:
            d["theta_noise_amp"] = self.theta_noise_amp
        d.update({k: v for k, v in self.extras.items() if k not in d})
        return d


@dataclass(frozen=True)
class PopulationLaw:
    """Finite law of (alpha, theta, x0, label); expectations are exact finite sums."""

    alpha: np.ndarray
    theta: np.ndarray
    x0: np.ndarray
    labels: np.ndarray
    probs: np.ndarray

    @property
    def n_atoms(self) -> int:
        return len(self.probs)

    def mean(self, values) -> float:
        return float(np.dot(self.probs, values))


def population_law(config: GameConfig):
    """Return (law, atom index of each player).

    Uses ``types``/``probs`` when declared, otherwise the empirical law of the players.
    """
    if config.types:
        law = PopulationLaw(
            alpha=np.array([t.alpha for t in config.types]),
            theta=np.array([t.theta for t in config.types]),
            x0=np.array([t.x0 for t in config.types]),
            labels=np.array([t.type_label for t in config.types]),
            probs=np.array(config.probs, dtype=float),
        )
        atom_of = []
        for p in config.players:
            hits = [
                a for a, t in enumerate(config.types)
                if t.type_label == p.type_label and t.alpha == p.alpha and t.theta == p.theta
            ]
            if not hits:
                raise ConfigError(f"player {p} does not match any declared type")
            atom_of.append(hits[0])
        return law, np.array(atom_of, dtype=int)
    N = config.N
    law = PopulationLaw(
        alpha=np.array([p.alpha for p in config.players]),
        theta=np.array([p.theta for p in config.players]),
        x0=np.array([p.x0 for p in config.players]),
        labels=np.array([p.type_label for p in config.players]),
        probs=np.full(N, 1.0 / N),
    )
    return law, np.arange(N)


# ---------------------------------------------------------------------------
# config IO

def config_from_dict(d: dict) -> GameConfig:
    """Build a GameConfig from a parsed key/value mapping."""
    try:
        mode = d.get("mode", "nplayer")
        T = float(d["horizon"])
        n_steps = int(d["n_steps"])
        players = tuple(_player(p, i) for i, p in enumerate(d.get("players", [])))
        types = tuple(_player(t, i) for i, t in enumerate(d.get("types", [])))
        probs = tuple(float(x) for x in d.get("probs", []))
        if types and not probs:
            probs = tuple([1.0 / len(types)] * len(types))
        labels = {p.type_label for p in players} | {t.type_label for t in types}
        n_labels = max(labels) + 1 if labels else 1
        returns = make_returns(d.get("return_model", "constant"), d.get("returns", {}), n_labels, T)
        known = {"mode", "horizon", "n_steps", "players", "types", "probs", "return_model",
                 "returns", "seed", "theta_noise_amp"}
        extras = {k: v for k, v in d.items() if k not in known}
        return GameConfig(
            T=T, n_steps=n_steps, mode=mode, returns=returns, players=players, types=types,
            probs=probs, seed=int(d.get("seed", 0)),
            theta_noise_amp=float(d.get("theta_noise_amp", 0.0)), extras=extras,
        )
    except KeyError as exc:
        raise ConfigError(f"missing config field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _player(p: dict, idx: int) -> PlayerSpec:
    return PlayerSpec(
        alpha=float(p["alpha"]),
        theta=float(p.get("theta", 0.0)),
        x0=float(p.get("x0", 0.0)),
        type_label=int(p.get("type_label", idx)),
    )


def preset_names() -> list:
    return sorted(f.name[:-5] for f in resources.files("relperf.presets").iterdir()
                  if f.name.endswith(".toml"))


def read_config_dict(path_or_preset) -> dict:
    """Parse a TOML (or JSON) config file or a shipped preset name into a dict.

    Raises:
        FileNotFoundError: neither a readable file nor a known preset.
        ConfigError: parse failure.
    """
    p = Path(str(path_or_preset))
    if p.is_file():
        text = p.read_text()
        suffix = p.suffix.lower()
    else:
        name = str(path_or_preset)
        res = resources.files("relperf.presets") / f"{name}.toml"
        if not res.is_file():
            raise FileNotFoundError(f"no config file or preset named '{path_or_preset}'")
        text = res.read_text()
        suffix = ".toml"
    try:
        if suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None


def load_config(path_or_preset, **overrides) -> GameConfig:
    d = read_config_dict(path_or_preset)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(d)


# ---------------------------------------------------------------------------
# paths

@dataclass(frozen=True)
class PathBundle:
    """Layered Brownian increments: one common path per block, K idiosyncratic copies."""

    common_increments: np.ndarray  # [n_blocks, n_steps]
    idio_increments: np.ndarray  # [n_blocks, K, n_steps]
    dt: float
    seed: int = 0

    @property
    def n_blocks(self) -> int:
        return self.common_increments.shape[0]

    @property
    def K(self) -> int:
        return self.idio_increments.shape[1]

    @property
    def n_steps(self) -> int:
        return self.common_increments.shape[1]

    @property
    def n_paths(self) -> int:
        return self.n_blocks * self.K

    def flat(self):
        """(dW, dW0) flattened over (block, copy) -> two [n_paths, n_steps] arrays."""
        dw = self.idio_increments.reshape(self.n_paths, self.n_steps)
        dw0 = np.repeat(self.common_increments, self.K, axis=0)
        return dw, dw0

    def brownian(self):
        """Cumulative (W, W0) on the grid, flattened -> two [n_paths, n_steps + 1] arrays."""
        dw, dw0 = self.flat()
        w = np.zeros((self.n_paths, self.n_steps + 1))
        w0 = np.zeros_like(w)
        np.cumsum(dw, axis=1, out=w[:, 1:])
        np.cumsum(dw0, axis=1, out=w0[:, 1:])
        return w, w0

    def copy(self, i: int) -> "PathBundle":
        """Bundle restricted to idiosyncratic copy ``i`` (K = 1)."""
        return PathBundle(self.common_increments, self.idio_increments[:, i:i + 1, :], self.dt, self.seed)


def _block_rng(seed: int, block: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block, stream))))


def sample_paths(config: GameConfig, n_blocks: int, K: int, seed: Optional[int] = None) -> PathBundle:
    """Draw a PathBundle with counter-based per-block streams.

    Block ``b`` uses its own Philox stream keyed by ``(seed, b)``, so its draws do not
    depend on how many other blocks are drawn or in which order.

    Raises:
        ConfigError: nonpositive counts.
    """
    if n_blocks < 1 or K < 1:
        raise ConfigError(f"n_blocks and K must be >= 1, got {n_blocks}, {K}")
    seed = config.seed if seed is None else seed
    return _sample(seed, n_blocks, K, config.n_steps, config.dt)


def _sample(seed, n_blocks, K, n_steps, dt, blocks: Optional[Sequence[int]] = None) -> PathBundle:
    if n_steps < 1 or not dt > 0:
        raise ConfigError("need n_steps >= 1 and T > 0")
    blocks = range(n_blocks) if blocks is None else blocks
    sd = math.sqrt(dt)
    common = np.empty((len(blocks), n_steps))
    idio = np.empty((len(blocks), K, n_steps))
    for r, blk in enumerate(blocks):
        common[r] = _block_rng(seed, blk, 0).standard_normal(n_steps) * sd
        idio[r] = _block_rng(seed, blk, 1).standard_normal((K, n_steps)) * sd
    return PathBundle(common, idio, dt, seed)


def sample_blocks(config: GameConfig, blocks: Sequence[int], K: int) -> PathBundle:
    """Draw only the listed blocks (same values as in a full ``sample_paths`` call)."""
    return _sample(config.seed, len(blocks), K, config.n_steps, config.dt, blocks)


# ---------------------------------------------------------------------------
# wealth and utility

@dataclass(frozen=True)
class WealthPaths:
    values: np.ndarray  # [n_paths, n_steps + 1]
    pi: np.ndarray
    pi0: np.ndarray


def simulate_wealth(paths: PathBundle, strategy, config: GameConfig, x0, label: int = 0,
                    b=None, b0=None) -> WealthPaths:
    """Euler wealth X_{k+1} = X_k + pi (b dt + dW) + pi0 (b0 dt + dW0).

    Args:
        paths: bundle; the flattened (block, copy) paths are used.
        strategy: pair (pi, pi0) broadcastable to [n_paths, n_steps].
        config: supplies the grid and the return rates of ``label``.
        x0: initial wealth (scalar or per path).
        label: return-rate type label.
        b, b0: optional explicit return grids overriding ``label``.

    Raises:
        ValueError: strategy not conforming to the grid.
    """
    if paths.n_steps != config.n_steps:
        raise ValueError(f"bundle has {paths.n_steps} steps, config has {config.n_steps}")
    pi, pi0 = (np.asarray(s, dtype=float) for s in strategy)
    target = (paths.n_paths, paths.n_steps)
    for s in (pi, pi0):
        try:
            np.broadcast_shapes(s.shape, target)
        except ValueError:
            raise ValueError(f"strategy shape {s.shape} does not conform to {target}") from None
    if b is None or b0 is None:
        bg, b0g = config.return_grid([label])
        b = bg[0] if b is None else b
        b0 = b0g[0] if b0 is None else b0
    dw, dw0 = paths.flat()
    x = kernels.euler_wealth(x0, pi, pi0, b, b0, dw, dw0, config.dt)
    return WealthPaths(x, np.broadcast_to(pi, target), np.broadcast_to(pi0, target))


def exp_utility(xT, peer_avg, alpha: float, theta: float, return_clamped: bool = False):
    """-exp(-alpha (xT - theta peer_avg)); the exponent is clamped to +-700."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    expo = -alpha * (np.asarray(xT, dtype=float) - theta * np.asarray(peer_avg, dtype=float))
    vals, n = kernels.clamped_neg_exp(expo)
    out = float(vals) if np.ndim(vals) == 0 else vals
    return (out, n) if return_clamped else out
