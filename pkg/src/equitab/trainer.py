"""Pre-training loop: Adam, warmup + cosine schedule, checkpoints, eval log.

Batch ``t`` (1-based) is drawn from the prior with a seed derived from
(run seed, t), so the data stream depends only on the config and seed and a
resumed run sees exactly the batches an uninterrupted run would.
"""

import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .baseline import BaselineModel
from .errors import (
    CheckpointHeaderError,
    CheckpointTensorCountError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    TrainingDivergenceError,
)
from .model import EquiTabModel, ModelConfig
from .prior import PriorConfig, sample_batch

log = logging.getLogger(__name__)

MODELS = {"equitab": EquiTabModel, "baseline": BaselineModel}
CHECKPOINT_MAGIC = "equitab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    total_batches: int = 20_000
    batch_size: int = 16
    lr_max: float = 1e-4
    warmup_batches: int = 2_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 500
    eval_episodes: int = 64
    clip_grad: float = 0.0  # 0 disables clipping
    model: str = "equitab"
    prior: PriorConfig = field(default_factory=PriorConfig)
    model_config: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown model {self.model!r}; expected one of {sorted(MODELS)}")
        if self.lr_max <= 0:
            raise ConfigurationError("lr_max must be positive")
        if not 0 <= self.warmup_batches <= self.total_batches:
            raise ConfigurationError("warmup_batches must lie in [0, total_batches]")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError("batch_size and eval_every must be positive")
        self.prior.validate()
        self.model_config.validate()
        return self


def lr_at(step, config):
    """Linear ramp 0 -> lr_max over the warmup, then cosine decay to 0 at total_batches."""
    w, total, peak = config.warmup_batches, config.total_batches, config.lr_max
    if step <= w:
        return peak * step / w if w else peak
    if total == w:
        return 0.0
    frac = min(1.0, (step - w) / (total - w))
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def batch_seed(seed, step):
    return int(np.random.SeedSequence([seed, step]).generate_state(1, np.uint32)[0])


def eval_seed(seed, i):
    return int(np.random.SeedSequence([seed, 0xE7A1, i]).generate_state(1, np.uint32)[0])


def make_model(config, seed=None, dtype=np.float32):
    cls = MODELS[config.model]
    return cls.initialize(config.model_config, config.seed if seed is None else seed, dtype)


def loss_on_batch(model, batch):
    """Mean cross-entropy over every test point of every episode in the batch."""
    logits = model.logits(batch)
    return T.cross_entropy_from_logits(logits, np.asarray(batch.Ystar, dtype=logits.dtype))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, step=None):
    """One bias-corrected Adam update in place; raises on non-finite gradients."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergenceError(state.t + 1 if step is None else step, name)
    state.t += 1
    t = state.t
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        dtype = p.data.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (beta1 * m + (1 - beta1) * g).astype(dtype)
        v = (beta2 * v + (1 - beta2) * g * g).astype(dtype)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(dtype)
    return params, state


def clip_gradients(grads, max_norm):
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        grads = {k: (g * scale).astype(g.dtype) for k, g in grads.items()}
    return grads, total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: str
    config: dict  # flat key -> value strings
    tensors: dict  # name -> float32 array, header order
    step: int = 0
    rng_state: str = ""
    version: int = CHECKPOINT_VERSION


def _encode_value(v):
    s = str(v)
    if any(c.isspace() for c in s) or s == "":
        raise CheckpointHeaderError(f"config value {v!r} contains whitespace")
    return s


def checkpoint_bytes(ckpt):
    lines = [f"{CHECKPOINT_MAGIC} {ckpt.version}", f"model {ckpt.model}", f"step {ckpt.step}",
             f"rng {_encode_value(ckpt.rng_state or '-')}"]
    for k in ckpt.config:
        lines.append(f"config {k} {_encode_value(ckpt.config[k])}")
    lines.append(f"tensors {len(ckpt.tensors)}")
    payload = []
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        lines.append(" ".join([name, str(arr.ndim)] + [str(n) for n in arr.shape]))
        payload.append(arr.tobytes(order="C"))
    header = "\n".join(lines) + "\n\n"
    return header.encode("utf-8") + b"".join(payload)


def save_checkpoint(path, ckpt):
    data = checkpoint_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_checkpoint(data):
    end = data.find(b"\n\n")
    if end < 0:
        raise CheckpointHeaderError("header terminator not found")
    try:
        lines = data[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise CheckpointHeaderError(f"header is not UTF-8: {exc}") from None
    first = lines[0].split()
    if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
        raise CheckpointHeaderError(f"bad magic line {lines[0]!r}")
    try:
        version = int(first[1])
    except ValueError:
        raise CheckpointHeaderError(f"bad version {first[1]!r}") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")

    meta, config, specs, declared = {}, {}, [], None
    try:
        for line in lines[1:]:
            parts = line.split()
            if not parts:
                raise CheckpointHeaderError("empty header line")
            if declared is None:
                if parts[0] == "config" and len(parts) == 3:
                    config[parts[1]] = parts[2]
                elif parts[0] == "tensors" and len(parts) == 2:
                    declared = int(parts[1])
                elif parts[0] in ("model", "step", "rng") and len(parts) == 2:
                    meta[parts[0]] = parts[1]
                else:
                    raise CheckpointHeaderError(f"unrecognised header line {line!r}")
            else:
                rank = int(parts[1])
                shape = tuple(int(n) for n in parts[2:])
                if len(shape) != rank or any(n < 0 for n in shape):
                    raise CheckpointHeaderError(f"bad tensor line {line!r}")
                specs.append((parts[0], shape))
    except (ValueError, IndexError):
        raise CheckpointHeaderError(f"malformed header line {line!r}") from None
    if declared is None or not {"model", "step"} <= meta.keys():
        raise CheckpointHeaderError("header missing model, step, or tensors lines")
    if not meta["step"].isdigit():
        raise CheckpointHeaderError(f"bad step {meta['step']!r}")
    if declared != len(specs):
        raise CheckpointTensorCountError(f"header declares {declared} tensors, lists {len(specs)}")

    payload = memoryview(data)[end + 2:]
    need = sum(4 * int(np.prod(s)) for _, s in specs)
    if len(payload) < need:
        raise CheckpointTruncatedError(f"payload has {len(payload)} bytes, header needs {need}")
    if len(payload) > need:
        raise CheckpointTruncatedError(f"payload has {len(payload) - need} trailing bytes")
    tensors, offset = {}, 0
    for name, shape in specs:
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += 4 * count
    rng = meta.get("rng", "-")
    return Checkpoint(meta["model"], config, tensors, int(meta["step"]), "" if rng == "-" else rng, version)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# config flattening
# ---------------------------------------------------------------------------


def flatten_config(config):
    """TrainConfig -> flat {key: string}; nested configs use prior.* and model.* keys."""
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name == "prior":
            for k, v in asdict(value).items():
                out[f"prior.{k}"] = _fmt(v)
        elif f.name == "model_config":
            for k, v in asdict(value).items():
                out[f"model.{k}"] = _fmt(v)
        else:
            out[f.name] = _fmt(value)
    return out


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(text, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p for p in text.replace(":", ",").split(",") if p.strip()]
        if len(parts) == 1:
            parts = parts * 2
        return tuple(_coerce(p.strip(), like[0]) for p in parts)
    return text


def _apply(obj, values):
    kwargs = {}
    names = {f.name for f in fields(obj)}
    for k, v in values.items():
        if k not in names:
            raise ConfigurationError(f"unknown key {k!r}")
        kwargs[k] = _coerce(v, getattr(obj, k))
    return replace(obj, **kwargs)


def train_config_from_flat(flat, base=None):
    """Build a TrainConfig from flat string pairs such as ``prior.q_range = 2,5``."""
    base = base or TrainConfig()
    top, prior, model = {}, {}, {}
    for k, v in flat.items():
        if k.startswith("prior."):
            prior[k[6:]] = v
        elif k.startswith("model."):
            model[k[6:]] = v
        else:
            top[k] = v
    cfg = _apply(base, top)
    return replace(cfg, prior=_apply(cfg.prior, prior), model_config=_apply(cfg.model_config, model))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    model: object
    adam: AdamState
    step: int = 0
    losses: list = field(default_factory=list)  # per-step training loss
    log_rows: list = field(default_factory=list)


def new_state(config):
    config.validate()
    return TrainState(config, make_model(config), AdamState())


def state_to_checkpoint(state):
    tensors = {}
    for name, p in state.model.params.items():
        tensors[name] = p.data
    for name in state.model.params:
        if name in state.adam.m:
            tensors[f"adam.m.{name}"] = state.adam.m[name]
            tensors[f"adam.v.{name}"] = state.adam.v[name]
    return Checkpoint(state.config.model, flatten_config(state.config), tensors, state.step,
                      f"seedseq:{state.config.seed}")


def state_from_checkpoint(ckpt, config=None):
    config = (config or train_config_from_flat(ckpt.config)).validate()
    model = MODELS[ckpt.model](config.model_config,
                               {k: T.Tensor(v, requires_grad=True, name=k)
                                for k, v in ckpt.tensors.items() if not k.startswith("adam.")})
    adam = AdamState(t=ckpt.step)
    for k, v in ckpt.tensors.items():
        if k.startswith("adam.m."):
            adam.m[k[7:]] = v
        elif k.startswith("adam.v."):
            adam.v[k[7:]] = v
    return TrainState(config, model, adam, ckpt.step)


def model_from_checkpoint(ckpt, dtype=np.float32):
    config = train_config_from_flat(ckpt.config)
    params = {k: T.Tensor(v.astype(dtype), requires_grad=True, name=k)
              for k, v in ckpt.tensors.items() if not k.startswith("adam.")}
    return MODELS[ckpt.model](config.model_config, params)


def eval_episodes(config):
    """Fixed held-out episodes, one per seed, independent of the training stream."""
    return [sample_batch(config.prior, 1, eval_seed(config.seed, i)) for i in range(config.eval_episodes)]


def evaluate(model, batches):
    losses, accs = [], []
    with T.no_grad():
        for b in batches:
            logits = model.logits(b)
            losses.append(T.cross_entropy_from_logits(logits, b.Ystar.astype(logits.dtype)).item())
            accs.append(float((logits.data.argmax(-1) == b.Ystar.argmax(-1)).mean()))
    return float(np.mean(losses)), float(np.mean(accs))


LOG_HEADER = "step\tlr\ttrain_loss\teval_loss\teval_acc\tseconds"


def format_log_row(row):
    return "%d\t%.6e\t%.6f\t%.6f\t%.4f\t%.1f" % row


def train_step(state):
    cfg = state.config
    step = state.step + 1
    batch = sample_batch(cfg.prior, cfg.batch_size, batch_seed(cfg.seed, step))
    loss = loss_on_batch(state.model, batch)
    grads = T.backward(loss)
    named = {p.name: grads[p] for p in state.model.params.values() if p in grads}
    if cfg.clip_grad > 0:
        named, _ = clip_gradients(named, cfg.clip_grad)
    adam_step(state.model.params, named, state.adam, lr_at(step, cfg), cfg.beta1, cfg.beta2,
              cfg.adam_eps, step=step)
    state.step = step
    value = float(loss.item())
    state.losses.append(value)
    return value


def train(state, until=None, log_path=None, checkpoint_path=None, evals=None, progress=None):
    """Advance ``state`` to step ``until`` (default total_batches), evaluating every eval_every steps.

    Log rows and checkpoints are written at eval boundaries only, so a run
    resumed from any emitted checkpoint continues the log without gaps.
    """
    cfg = state.config
    until = cfg.total_batches if until is None else min(until, cfg.total_batches)
    evals = eval_episodes(cfg) if evals is None else evals
    start = time.perf_counter()
    window = []
    log_fh = None
    if log_path is not None:
        fresh = not os.path.exists(log_path) or state.step == 0
        log_fh = open(log_path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            log_fh.write(LOG_HEADER + "\n")
    try:
        while state.step < until:
            window.append(train_step(state))
            if state.step % cfg.eval_every == 0 or state.step == cfg.total_batches:
                eval_loss, eval_acc = evaluate(state.model, evals)
                row = (state.step, lr_at(state.step, cfg), float(np.mean(window)), eval_loss, eval_acc,
                       time.perf_counter() - start)
                window = []
                state.log_rows.append(row)
                if log_fh:
                    log_fh.write(format_log_row(row) + "\n")
                    log_fh.flush()
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, state_to_checkpoint(state))
                if progress:
                    progress(row)
                log.info(format_log_row(row))
    finally:
        if log_fh:
            log_fh.close()
    return state
