import math
from dataclasses import replace

import numpy as np
import pytest

from equitab import tensor as T
from equitab.errors import (
    CheckpointHeaderError,
    CheckpointTensorCountError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    TrainingDivergenceError,
)
from equitab.model import EquiTabModel, ModelConfig
from equitab.prior import PermutationSpec, PriorConfig, permute_batch, sample_batch
from equitab.tensor import Tensor
from equitab.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    checkpoint_bytes,
    flatten_config,
    load_checkpoint,
    loss_on_batch,
    lr_at,
    new_state,
    parse_checkpoint,
    save_checkpoint,
    state_from_checkpoint,
    state_to_checkpoint,
    train,
    train_config_from_flat,
)

TINY_MODEL = ModelConfig(d=8, n_layers=2, n_heads=2, hidden=8, p_max=4, decoder_hidden=4, q_max=3)
TINY_PRIOR = PriorConfig(n_range=(6, 14), total=16, p_range=(2, 4), q_range=(2, 3))


def tiny_config(**kw):
    base = dict(total_batches=100, batch_size=4, lr_max=3e-3, warmup_batches=10, eval_every=25,
                eval_episodes=4, prior=TINY_PRIOR, model_config=TINY_MODEL)
    base.update(kw)
    return TrainConfig(**base).validate()


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_lr_schedule_landmarks():
    cfg = TrainConfig(total_batches=1000, warmup_batches=100, lr_max=1e-3)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == pytest.approx(1e-3)
    assert lr_at(1000, cfg) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(100 + 900 / 2, cfg) == pytest.approx(5e-4)
    assert lr_at(50, cfg) == pytest.approx(5e-4)


def test_lr_continuous_and_non_negative():
    cfg = TrainConfig(total_batches=500, warmup_batches=37, lr_max=2e-3)
    lrs = np.array([lr_at(s, cfg) for s in range(501)])
    assert (lrs >= 0).all()
    assert np.abs(np.diff(lrs)).max() < 2e-3 / 30


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        TrainConfig(total_batches=10, warmup_batches=20).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_max=0.0).validate()


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


class UniformModel:
    def logits(self, batch):
        N, M, p, q = batch.dims
        return Tensor(np.zeros((batch.B, M, q)))


def test_uniform_rows_give_log_q():
    batch = sample_batch(PriorConfig(q_range=(4, 4), total=32, n_range=(8, 24)), 3, 0)
    assert loss_on_batch(UniformModel(), batch).item() == pytest.approx(math.log(4))


def test_equitab_loss_invariant_to_target_permutation():
    model = EquiTabModel.initialize(TINY_MODEL, 0, np.float32)
    batch = sample_batch(replace(TINY_PRIOR, q_range=(3, 3)), 4, 1)
    base = loss_on_batch(model, batch).item()
    rng = np.random.default_rng(0)
    for _ in range(5):
        perm = PermutationSpec.random(3, rng)
        assert loss_on_batch(model, permute_batch(batch, perm)).item() == pytest.approx(base, abs=1e-4)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_first_step_unit_gradient():
    p = {"w": Tensor(np.zeros(5), requires_grad=True)}
    adam_step(p, {"w": np.ones(5)}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"].data, -0.01, rtol=1e-6)


def test_adam_zero_gradient_is_noop():
    p = {"w": Tensor(np.arange(4.0), requires_grad=True)}
    adam_step(p, {"w": np.zeros(4)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, np.arange(4.0))


def test_adam_rejects_non_finite_gradient():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(TrainingDivergenceError) as info:
        adam_step(p, {"w": np.array([0.0, np.nan])}, AdamState(), lr=0.1, step=7)
    assert info.value.step == 7 and info.value.name == "w"
    assert isinstance(info.value, FloatingPointError)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def params_of(state):
    return {k: v.data.copy() for k, v in state.model.params.items()}


def test_two_runs_bit_identical():
    a = train(new_state(tiny_config()))
    b = train(new_state(tiny_config()))
    pa, pb = params_of(a), params_of(b)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert a.losses == b.losses


def test_loss_decreases_first_200_steps():
    drops = []
    for seed in range(5):
        cfg = tiny_config(total_batches=200, warmup_batches=20, eval_every=200, seed=seed)
        losses = train(new_state(cfg)).losses
        drops.append(np.mean(losses[:20]) - np.mean(losses[-20:]))
    assert np.median(drops) > 0


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config(total_batches=50, warmup_batches=5, eval_every=25)
    full = train(new_state(cfg))
    path = str(tmp_path / "ck.ckpt")
    first = train(new_state(cfg), until=25, checkpoint_path=path)
    resumed = train(state_from_checkpoint(load_checkpoint(path)))
    np.testing.assert_allclose(first.losses + resumed.losses, full.losses, atol=1e-6, rtol=0)
    for k, v in params_of(full).items():
        np.testing.assert_allclose(resumed.model.params[k].data, v, atol=1e-6, rtol=0)


def test_log_rows_at_eval_boundaries(tmp_path):
    log = tmp_path / "log.tsv"
    train(new_state(tiny_config(total_batches=60, eval_every=25)), log_path=str(log))
    lines = log.read_text().splitlines()
    assert lines[0].split("\t") == ["step", "lr", "train_loss", "eval_loss", "eval_acc", "seconds"]
    assert [int(r.split("\t")[0]) for r in lines[1:]] == [25, 50, 60]


def test_resumed_log_has_no_gaps(tmp_path):
    cfg = tiny_config(total_batches=75, eval_every=25)
    log, ck = str(tmp_path / "log.tsv"), str(tmp_path / "ck.ckpt")
    train(new_state(cfg), until=50, log_path=log, checkpoint_path=ck)
    train(state_from_checkpoint(load_checkpoint(ck)), log_path=log, checkpoint_path=ck)
    steps = [int(r.split("\t")[0]) for r in open(log).read().splitlines()[1:]]
    assert steps == [25, 50, 75]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@pytest.fixture
def checkpoint_file(tmp_path):
    state = train(new_state(tiny_config(total_batches=10, eval_every=10)))
    path = tmp_path / "a.ckpt"
    save_checkpoint(str(path), state_to_checkpoint(state))
    return path


def test_save_load_save_byte_identical(checkpoint_file, tmp_path):
    again = tmp_path / "b.ckpt"
    save_checkpoint(str(again), load_checkpoint(str(checkpoint_file)))
    assert again.read_bytes() == checkpoint_file.read_bytes()


def test_header_layout(checkpoint_file):
    data = checkpoint_file.read_bytes()
    header = data[:data.index(b"\n\n")].decode().splitlines()
    assert header[0] == "equitab-checkpoint 1"
    assert header[1] == "model equitab"
    assert header[2] == "step 10"
    count = next(int(line.split()[1]) for line in header if line.startswith("tensors "))
    tensor_lines = header[-count:]
    payload = len(data) - data.index(b"\n\n") - 2
    sizes = [int(np.prod([int(x) for x in line.split()[2:]])) for line in tensor_lines]
    assert payload == 4 * sum(sizes)


def test_truncated_payload_raises(checkpoint_file):
    with pytest.raises(CheckpointTruncatedError):
        parse_checkpoint(checkpoint_file.read_bytes()[:-4])


def test_trailing_bytes_raise(checkpoint_file):
    with pytest.raises(CheckpointTruncatedError):
        parse_checkpoint(checkpoint_file.read_bytes() + b"\0\0\0\0")


def test_version_mismatch_raises(checkpoint_file):
    data = checkpoint_file.read_bytes().replace(b"equitab-checkpoint 1", b"equitab-checkpoint 2", 1)
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(data)


def test_tensor_count_mismatch_raises(checkpoint_file):
    data = checkpoint_file.read_bytes()
    head, _, rest = data.partition(b"\ntensors ")
    count, _, tail = rest.partition(b"\n")
    with pytest.raises(CheckpointTensorCountError):
        parse_checkpoint(head + b"\ntensors " + str(int(count) + 1).encode() + b"\n" + tail)


def test_malformed_header_raises(checkpoint_file):
    with pytest.raises(CheckpointHeaderError):
        parse_checkpoint(b"not a checkpoint\n\n")
    with pytest.raises(CheckpointHeaderError):
        parse_checkpoint(checkpoint_file.read_bytes().replace(b"step 10", b"step ten", 1))


def test_checkpoint_records_flat_config():
    state = new_state(tiny_config())
    ckpt = state_to_checkpoint(state)
    assert train_config_from_flat(ckpt.config) == state.config
    assert ckpt.config == flatten_config(state.config)
    assert b"config prior.q_range 2,3" in checkpoint_bytes(ckpt)


def test_flat_config_rejects_unknown_key():
    with pytest.raises(ConfigurationError):
        train_config_from_flat({"not_a_key": "1"})


def test_no_grad_inside_eval_leaves_tape_enabled():
    train(new_state(tiny_config(total_batches=5, warmup_batches=1, eval_every=5)))
    assert T.is_grad_enabled()
