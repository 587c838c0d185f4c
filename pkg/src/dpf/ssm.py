"""Generative state-space models, the Kalman oracle and synthetic datasets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .engine import DTYPE, derive_seed, make_generator

DATASET_FORMAT_VERSION = 1
BORDER_VALUE = 0.5


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, d_X)
    observations: np.ndarray  # (T, *obs_shape)
    actions: np.ndarray | None = None  # (T, d_A)
    seed: int = 0

    def __post_init__(self):
        if len(self.states) != len(self.observations) + 1:
            raise ValueError("a trajectory needs T+1 states for T observations")
        if self.actions is not None and len(self.actions) != len(self.observations):
            raise ValueError("actions must have one row per observation")

    @property
    def T(self) -> int:
        return len(self.observations)


# --------------------------------------------------------------------------
# linear-Gaussian model
# --------------------------------------------------------------------------


@dataclass
class LinearGaussianSSM:
    """x0 ~ N(0, 1), x_t ~ N(theta1 x_{t-1}, 1), y_t ~ N(theta2 x_t, 0.1)."""

    theta1: float = 0.9
    theta2: float = 1.0
    init_var: float = 1.0
    trans_var: float = 1.0
    obs_var: float = 0.1

    model_id = "lgssm"
    state_dim = 1
    obs_shape = (1,)

    def sample_initial(self, n: int, g: torch.Generator) -> torch.Tensor:
        return math.sqrt(self.init_var) * torch.randn(n, 1, generator=g)

    def sample_transition(self, x: torch.Tensor, g: torch.Generator, action=None) -> torch.Tensor:
        return self.theta1 * x + math.sqrt(self.trans_var) * torch.randn(x.shape, generator=g)

    def sample_observation(self, x: torch.Tensor, g: torch.Generator) -> torch.Tensor:
        return self.theta2 * x + math.sqrt(self.obs_var) * torch.randn(x.shape, generator=g)

    def log_initial(self, x):
        return _normal_logpdf(x, 0.0, self.init_var).sum(-1)

    def log_transition(self, x_new, x_prev):
        return _normal_logpdf(x_new, self.theta1 * x_prev, self.trans_var).sum(-1)

    def log_observation(self, y, x):
        return _normal_logpdf(y, self.theta2 * x, self.obs_var).sum(-1)

    def params(self) -> dict:
        return {"theta1": self.theta1, "theta2": self.theta2}


def _normal_logpdf(x, mean, var):
    return -0.5 * (math.log(2 * math.pi * var) + (x - mean) ** 2 / var)


@dataclass
class KalmanResult:
    means: np.ndarray  # (T+1,) filtering means, index 0 is the prior
    variances: np.ndarray  # (T+1,)
    log_evidence_increments: np.ndarray  # (T,)
    log_evidence: float


def kalman_filter(model: LinearGaussianSSM, observations) -> KalmanResult:
    """Exact filtering distributions and log p(y_{1:T}) of the scalar model."""
    y = np.asarray(observations, dtype=np.float64).reshape(-1)
    a, c = float(model.theta1), float(model.theta2)
    m, p = 0.0, model.init_var
    means, variances, incs = [m], [p], []
    for yt in y:
        m_pred = a * m
        p_pred = a * a * p + model.trans_var
        s = c * c * p_pred + model.obs_var
        assert s > 0, "non-positive predictive variance"
        resid = yt - c * m_pred
        incs.append(-0.5 * (math.log(2 * math.pi * s) + resid * resid / s))
        k = p_pred * c / s
        m = m_pred + k * resid
        p = (1 - k * c) * p_pred
        means.append(m)
        variances.append(p)
    incs_arr = np.array(incs)
    total = 0.0
    for v in incs:
        total += v
    return KalmanResult(np.array(means), np.array(variances), incs_arr, total)


def kalman_log_evidence_grid(theta1, theta2, observations, model: LinearGaussianSSM | None = None):
    """Exact log evidence evaluated on broadcastable arrays of (theta1, theta2).

    ``observations`` is one sequence (T,) or a batch (n, T); a batch returns
    the sum of the per-sequence log evidences.
    """
    base = model or LinearGaussianSSM()
    a, c = np.broadcast_arrays(np.asarray(theta1, float), np.asarray(theta2, float))
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim == 3 and obs.shape[-1] == 1:
        obs = obs[..., 0]
    obs = np.atleast_2d(obs)
    a, c = a[..., None], c[..., None]  # trailing axis runs over sequences
    m = np.zeros(a.shape[:-1] + (obs.shape[0],))
    p = np.full(m.shape, base.init_var)
    ll = np.zeros(m.shape)
    for yt in obs.T:
        m_pred = a * m
        p_pred = a * a * p + base.trans_var
        s = c * c * p_pred + base.obs_var
        resid = yt - c * m_pred
        ll += -0.5 * (np.log(2 * np.pi * s) + resid * resid / s)
        k = p_pred * c / s
        m = m_pred + k * resid
        p = (1 - k * c) * p_pred
    return ll.sum(-1)


# --------------------------------------------------------------------------
# planar robot world
# --------------------------------------------------------------------------


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    if torch.is_tensor(a):
        w = torch.remainder(a + math.pi, 2 * math.pi) - math.pi
        return torch.where(w <= -math.pi, w + 2 * math.pi, w)
    w = np.remainder(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2 * np.pi, w)


def robot_transition(pose: torch.Tensor, action: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Odometry motion model; ``noise`` holds (alpha1, alpha2, alpha3) per row."""
    pose = torch.as_tensor(pose, dtype=DTYPE)
    action = torch.as_tensor(action, dtype=DTYPE)
    noise = torch.as_tensor(noise, dtype=DTYPE)
    s1, s2, eta = pose[..., 0], pose[..., 1], pose[..., 2]
    v1, v2, omega = action[..., 0], action[..., 1], action[..., 2]
    eta_hat = eta + noise[..., 2]
    c, s = torch.cos(eta_hat), torch.sin(eta_hat)
    s1_new = s1 + v1 * c + v2 * s + noise[..., 0]
    s2_new = s2 + v1 * s - v2 * c + noise[..., 1]
    eta_new = wrap_angle(eta_hat + omega)
    return torch.stack([s1_new, s2_new, eta_new], dim=-1)


def patch_offsets(h: int, w: int) -> torch.Tensor:
    """Integer grid offsets (h*w, 2) as (column, row), centred on the pose."""
    rows = torch.arange(h, dtype=DTYPE) - h // 2
    cols = torch.arange(w, dtype=DTYPE) - w // 2
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack([cc.reshape(-1), rr.reshape(-1)], dim=-1)


def bilinear_sample(grid: torch.Tensor, cols: torch.Tensor, rows: torch.Tensor,
                    border: float = BORDER_VALUE) -> torch.Tensor:
    """Bilinear read of ``grid[row, col]`` at real coordinates; outside reads ``border``."""
    H, W = grid.shape
    c0 = torch.floor(cols.detach())
    r0 = torch.floor(rows.detach())
    fc = cols - c0
    fr = rows - r0
    c0 = c0.long()
    r0 = r0.long()
    flat = grid.reshape(-1)

    def read(r, c):
        inside = (r >= 0) & (r < H) & (c >= 0) & (c < W)
        idx = (r.clamp(0, H - 1) * W + c.clamp(0, W - 1)).reshape(-1)
        vals = flat[idx].reshape(r.shape)
        return torch.where(inside, vals, torch.full_like(vals, border))

    v00 = read(r0, c0)
    v01 = read(r0, c0 + 1)
    v10 = read(r0 + 1, c0)
    v11 = read(r0 + 1, c0 + 1)
    top = v00 * (1 - fc) + v01 * fc
    bot = v10 * (1 - fc) + v11 * fc
    return top * (1 - fr) + bot * fr


@dataclass
class PlanarWorld:
    """Occupancy grid plus odometry noise; poses are (col, row, heading)."""

    grid: np.ndarray
    noise_scales: tuple[float, float, float] = (0.2, 0.2, 0.05)
    patch_shape: tuple[int, int] = (8, 8)
    pixel_noise: float = 0.1
    init_noise: tuple[float, float, float] = (0.5, 0.5, 0.1)

    model_id = "planar"
    state_dim = 3
    action_dim = 3

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self._grid_t = torch.from_numpy(self.grid)
        self._offsets = patch_offsets(*self.patch_shape)

    @property
    def obs_shape(self):
        return tuple(self.patch_shape)

    def observe_patch(self, pose: torch.Tensor) -> torch.Tensor:
        """Local map for each pose in ``pose`` (..., 3) -> (..., h, w)."""
        pose = torch.as_tensor(pose, dtype=DTYPE)
        eta = pose[..., 2:3]
        c, s = torch.cos(eta), torch.sin(eta)
        dx, dy = self._offsets[:, 0], self._offsets[:, 1]
        cols = pose[..., 0:1] + c * dx - s * dy
        rows = pose[..., 1:2] + s * dx + c * dy
        vals = bilinear_sample(self._grid_t, cols, rows)
        return vals.reshape(*pose.shape[:-1], *self.patch_shape)


def observe_patch(world: PlanarWorld, pose) -> torch.Tensor:
    return world.observe_patch(pose)


def smooth_random_map(shape: tuple[int, int], seed: int, blur: float = 3.0) -> np.ndarray:
    """Gaussian-blurred white noise rescaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    field_ = gaussian_filter(rng.standard_normal(shape), blur, mode="wrap")
    lo, hi = field_.min(), field_.max()
    return (field_ - lo) / (hi - lo)


@dataclass
class PlanarTask:
    """Generator of planar trajectories inside one world."""

    world: PlanarWorld
    speed: float = 1.0
    turn_scale: float = 0.3
    margin: float = 4.0

    model_id = "planar"

    def random_actions(self, T: int, g: torch.Generator) -> torch.Tensor:
        fwd = self.speed * (0.5 + 0.5 * torch.rand(T, generator=g))
        side = 0.2 * self.speed * (torch.rand(T, generator=g) * 2 - 1)
        turn = self.turn_scale * torch.randn(T, generator=g)
        return torch.stack([fwd, side, turn], dim=-1)

    def simulate(self, T: int, seed: int) -> Trajectory:
        g = make_generator(seed)
        H, W = self.world.grid.shape
        start = torch.stack([
            self.margin + torch.rand((), generator=g) * (W - 2 * self.margin),
            self.margin + torch.rand((), generator=g) * (H - 2 * self.margin),
            (torch.rand((), generator=g) * 2 - 1) * math.pi,
        ])
        actions = self.random_actions(T, g)
        sig = torch.tensor(self.world.noise_scales)
        states = [start]
        obs = []
        for t in range(T):
            noise = torch.randn(3, generator=g) * sig
            pose = robot_transition(states[-1], actions[t], noise)
            states.append(pose)
            patch = self.world.observe_patch(pose)
            obs.append(patch + self.world.pixel_noise * torch.randn(patch.shape, generator=g))
        return Trajectory(
            torch.stack(states).numpy(), torch.stack(obs).numpy(), actions.numpy(), seed
        )


# --------------------------------------------------------------------------
# simulation and datasets
# --------------------------------------------------------------------------


def simulate(spec, T: int, seed: int) -> Trajectory:
    """Ancestral sample x0, x1, y1, ..., xT, yT."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if isinstance(spec, PlanarTask):
        return spec.simulate(T, seed)
    g = make_generator(seed)
    x = spec.sample_initial(1, g)[0]
    states, obs = [x], []
    for _ in range(T):
        x = spec.sample_transition(x, g)
        y = spec.sample_observation(x, g)
        states.append(x)
        obs.append(y)
    states_arr = torch.stack(states).numpy()
    obs_arr = torch.stack(obs).numpy()
    if not (np.isfinite(states_arr).all() and np.isfinite(obs_arr).all()):
        raise FloatingPointError("non-finite sample during simulation")
    return Trajectory(states_arr, obs_arr, None, seed)


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    model_id: str
    seed: int
    meta: dict = field(default_factory=dict)
    grid: np.ndarray | None = None

    def __len__(self):
        return len(self.trajectories)

    @property
    def T(self) -> int:
        return self.trajectories[0].T

    def split(self, test_fraction: float) -> tuple[list[Trajectory], list[Trajectory]]:
        n_test = int(round(len(self) * test_fraction))
        n_train = len(self) - n_test
        return self.trajectories[:n_train], self.trajectories[n_train:]


def make_dataset(spec, count: int, T: int, seed: int) -> Dataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    trajs = [simulate(spec, T, derive_seed(seed, i)) for i in range(count)]
    if isinstance(spec, PlanarTask):
        w = spec.world
        meta = {
            "noise_scales": list(w.noise_scales),
            "patch_shape": list(w.patch_shape),
            "pixel_noise": w.pixel_noise,
            "init_noise": list(w.init_noise),
        }
        return Dataset(trajs, "planar", seed, meta, w.grid)
    return Dataset(trajs, spec.model_id, seed, spec.params())


def _write_blob(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_blob(path: Path, shape) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype="<f8").reshape(shape).astype(np.float64)


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    first = ds.trajectories[0]
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "model": ds.model_id,
        "count": len(ds),
        "T": ds.T,
        "seed": ds.seed,
        "state_dim": int(first.states.shape[1]),
        "obs_shape": list(first.observations.shape[1:]),
        "action_dim": None if first.actions is None else int(first.actions.shape[1]),
        "trajectory_seeds": [str(t.seed) for t in ds.trajectories],
        "meta": ds.meta,
        "grid_shape": None if ds.grid is None else list(ds.grid.shape),
    }
    _write_blob(d / "states.bin", np.stack([t.states for t in ds.trajectories]))
    _write_blob(d / "observations.bin", np.stack([t.observations for t in ds.trajectories]))
    if first.actions is not None:
        _write_blob(d / "actions.bin", np.stack([t.actions for t in ds.trajectories]))
    if ds.grid is not None:
        _write_blob(d / "map.bin", ds.grid)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('format_version')}")
    n, T, dx = manifest["count"], manifest["T"], manifest["state_dim"]
    states = _read_blob(d / "states.bin", (n, T + 1, dx))
    obs = _read_blob(d / "observations.bin", (n, T, *manifest["obs_shape"]))
    actions = None
    if manifest["action_dim"] is not None:
        actions = _read_blob(d / "actions.bin", (n, T, manifest["action_dim"]))
    grid = None
    if manifest["grid_shape"] is not None:
        grid = _read_blob(d / "map.bin", tuple(manifest["grid_shape"]))
    seeds = [int(s) for s in manifest["trajectory_seeds"]]
    trajs = [
        Trajectory(states[i], obs[i], None if actions is None else actions[i], seeds[i])
        for i in range(n)
    ]
    return Dataset(trajs, manifest["model"], manifest["seed"], manifest["meta"], grid)
