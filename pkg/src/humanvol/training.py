"""Run configuration, the two-stage training schedule and training checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, load_checkpoint, no_grad, save_checkpoint
from .layers import project_silhouette
from .losses import LossWeights, loss_combined, loss_normal, loss_silhouette, loss_volume
from .network import (
    FUSION_MODES,
    Network,
    NetworkSpec,
    build,
    encode_image,
    forward,
    project_normals,
    refine,
    to_batch,
    volume_to_volume,
)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iteration", "L_V", "L_FS", "L_SS", "L_N", "L")


class ConfigError(ValueError):
    pass


class CheckpointMismatch(ValueError):
    """A checkpoint that cannot seed the requested run."""


@dataclass
class TrainConfig:
    scale_divisor: int = 4
    fusion_mode: str = "multi_scale"
    lambda_fs: float = 0.1
    lambda_ss: float = 0.1
    lambda_n: float = 0.01
    gamma: float = 0.7
    lr: float = 2e-4
    batch: int = 4
    stage1_iters: int = 200
    stage2_iters: int = 50
    holdout_bodies: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        for name in ("batch",):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("stage1_iters", "stage2_iters", "holdout_bodies"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        try:
            self.weights
            self.spec
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_fs, self.lambda_ss, self.lambda_n, self.gamma)

    @property
    def spec(self) -> NetworkSpec:
        return NetworkSpec(scale_divisor=self.scale_divisor, fusion_mode=self.fusion_mode)

    def render(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)) + "\n"


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = dataclasses.asdict(base or TrainConfig())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        conv = {"int": int, "float": float, "str": str}[types[key]]
        try:
            values[key] = conv(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return TrainConfig(**values)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), base)


# -- data split -----------------------------------------------------------------

def split_corpus(items, holdout_bodies: int):
    """Hold out every view of the last ``holdout_bodies`` bodies (manifest order)."""
    seeds = list(dict.fromkeys(it.seed for it in items))
    if holdout_bodies >= len(seeds):
        raise ValueError(f"cannot hold out {holdout_bodies} of {len(seeds)} bodies")
    held = set(seeds[len(seeds) - holdout_bodies:]) if holdout_bodies else set()
    return [it for it in items if it.seed not in held], [it for it in items if it.seed in held]


def batch_indices(seed: int, iteration: int, n: int, batch: int) -> np.ndarray:
    """Batch for one iteration; depends only on (seed, iteration) so resumes are exact."""
    rng = np.random.default_rng([seed, iteration])
    return rng.choice(n, size=batch, replace=n < batch)


# -- state and checkpoints ----------------------------------------------------------

@dataclass
class TrainState:
    net: Network
    adam: AdamState
    iteration: int = 0
    history: list = field(default_factory=list)


def _fusion_code(mode: str) -> int:
    return FUSION_MODES.index(mode)


def state_to_arrays(state: TrainState) -> dict[str, np.ndarray]:
    out = {p.name: p.data for p in state.net.params}
    for p in state.net.params:
        if p.name in state.adam.m:
            out[f"adam/m/{p.name}"] = state.adam.m[p.name]
            out[f"adam/v/{p.name}"] = state.adam.v[p.name]
    spec = state.net.spec
    out["meta/iteration"] = np.array([state.iteration])
    out["meta/adam_step"] = np.array([state.adam.step])
    out["meta/scale_divisor"] = np.array([spec.scale_divisor])
    out["meta/fusion_mode"] = np.array([_fusion_code(spec.fusion_mode)])
    return out


def save_state(path, state: TrainState) -> None:
    save_checkpoint(path, state_to_arrays(state))


def spec_from_checkpoint(arrays: dict) -> NetworkSpec:
    try:
        d = int(arrays["meta/scale_divisor"][0])
        mode = FUSION_MODES[int(arrays["meta/fusion_mode"][0])]
    except (KeyError, IndexError) as exc:
        raise CheckpointMismatch("checkpoint lacks network metadata") from exc
    return NetworkSpec(scale_divisor=d, fusion_mode=mode)


def load_state(path, config: TrainConfig | None = None, require_refiner: bool = False) -> TrainState:
    """Rebuild network and optimiser state from a training checkpoint."""
    arrays = load_checkpoint(path)
    spec = spec_from_checkpoint(arrays)
    if config is not None and (spec.scale_divisor, spec.fusion_mode) != (config.scale_divisor, config.fusion_mode):
        raise CheckpointMismatch(
            f"checkpoint was trained with divisor {spec.scale_divisor}/{spec.fusion_mode}, "
            f"config asks for {config.scale_divisor}/{config.fusion_mode}"
        )
    net = build(spec)
    missing = [p.name for p in net.params if p.name not in arrays]
    if require_refiner and any(n.startswith("r/") for n in missing):
        raise CheckpointMismatch("checkpoint lacks refiner (r/) parameters required for stage 2")
    if missing:
        raise CheckpointMismatch(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    adam = AdamState(lr=config.lr if config else AdamState.lr)
    for p in net.params:
        a = arrays[p.name]
        if a.shape != p.data.shape:
            raise CheckpointMismatch(f"parameter {p.name}: shape {a.shape} vs expected {p.data.shape}")
        p.tensor.data = a.astype(np.float32)
        if f"adam/m/{p.name}" in arrays:
            adam.m[p.name] = arrays[f"adam/m/{p.name}"]
            adam.v[p.name] = arrays[f"adam/v/{p.name}"]
    adam.step = int(arrays.get("meta/adam_step", np.zeros(1))[0])
    return TrainState(net, adam, int(arrays.get("meta/iteration", np.zeros(1))[0]))


def new_state(config: TrainConfig) -> TrainState:
    return TrainState(build(config.spec, seed=config.seed), AdamState(lr=config.lr))


# -- steps ----------------------------------------------------------------------

def _as_float(t) -> float:
    return float(t.item())


def stage1_step(net: Network, batch: dict, weights: LossWeights):
    """Volume path under the reconstruction losses, refiner on ground-truth projections."""
    feats = encode_image(net, batch["image"], batch["semantic_map"])
    occ = volume_to_volume(net, batch["semantic_volume"], feats)[:, 0]
    l_v = loss_volume(occ, batch["occupancy"], weights.gamma)
    l_fs = loss_silhouette(project_silhouette(occ, "front"), batch["sil_front"])
    l_ss = loss_silhouette(project_silhouette(occ, "side"), batch["sil_side"])
    with no_grad():
        _, n_gt = project_normals(Tensor(batch["occupancy"]))
    l_n = loss_normal(refine(net, batch["image"], batch["semantic_map"], n_gt.data), batch["normal"])
    recon = l_v + l_fs * weights.lambda_fs + l_ss * weights.lambda_ss
    return recon + l_n, (l_v, l_fs, l_ss, l_n)


def stage2_step(net: Network, batch: dict, weights: LossWeights):
    out = forward(net, batch["image"], batch["semantic_map"], batch["semantic_volume"])
    occ = out.V_o[:, 0]
    l_v = loss_volume(occ, batch["occupancy"], weights.gamma)
    l_fs = loss_silhouette(out.S_fv, batch["sil_front"])
    l_ss = loss_silhouette(out.S_sv, batch["sil_side"])
    l_n = loss_normal(out.N, batch["normal"])
    return loss_combined(l_v, l_fs, l_ss, l_n, weights), (l_v, l_fs, l_ss, l_n)


def reconstruction_loss(row: dict, weights: LossWeights) -> float:
    """``L_V + lambda_FS L_FS + lambda_SS L_SS`` from one loss-log row."""
    return row["L_V"] + weights.lambda_fs * row["L_FS"] + weights.lambda_ss * row["L_SS"]


def _stage_targets(config: TrainConfig) -> dict[int, int]:
    return {1: config.stage1_iters, 2: config.stage1_iters + config.stage2_iters}


def train(state: TrainState, items, config: TrainConfig, stages=(1, 2), on_row=None) -> TrainState:
    """Advance ``state`` through the requested stages, one Adam step per iteration.

    Iterations are numbered globally: stage 1 runs up to ``stage1_iters`` and
    stage 2 up to ``stage1_iters + stage2_iters``.  Each logged row carries the
    four components and their weighted sum.
    """
    train_items, _ = split_corpus(items, config.holdout_bodies)
    if not train_items:
        raise ValueError("training corpus is empty")
    weights = config.weights
    state.adam.lr = config.lr
    targets = _stage_targets(config)
    for stage in stages:
        step = stage1_step if stage == 1 else stage2_step
        while state.iteration < targets[stage]:
            it = state.iteration + 1
            idx = batch_indices(config.seed, it, len(train_items), config.batch)
            batch = to_batch([train_items[i] for i in idx])
            state.net.params.zero_grad()
            total, parts = step(state.net, batch, weights)
            values = [_as_float(p) for p in parts]
            combined = _as_float(loss_combined(*values, weights))  # raises on non-finite parts
            total.backward()
            adam_step(state.net.params, state.adam)
            state.iteration = it
            row = dict(zip(LOSS_COLUMNS, [it] + values + [combined]))
            state.history.append(row)
            if on_row is not None:
                on_row(row)
            log.info("stage %d iteration %d: L=%.5f (L_V=%.5f L_FS=%.5f L_SS=%.5f L_N=%.5f)",
                     stage, it, combined, *values)
    return state


class LossLog:
    """Append-only CSV writer for per-iteration losses."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._w.writerow(LOSS_COLUMNS)

    def __call__(self, row: dict) -> None:
        self._w.writerow([row["iteration"]] + [repr(float(row[c])) for c in LOSS_COLUMNS[1:]])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
