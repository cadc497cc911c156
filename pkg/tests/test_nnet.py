import math

import numpy as np
import pytest

from ecgprofile.nnet import engine as E
from ecgprofile.nnet import (BlockConfig, CheckpointError, EarlyStopping, ModelConfig, ShapeError,
                             Tensor, TrainConfig, TrainingError, adamw_step, bottleneck_block,
                             cosine_lr, finetune, init_params, load_checkpoint, model_forward,
                             predict_proba, save_checkpoint, tiny_config, train)
from ecgprofile.nnet.train import History

import gradcheck as G
from oracles import conv1d_loops

CASES = G.op_cases(seed=11)


# --- gradient checks ------------------------------------------------------

@pytest.mark.parametrize("op", sorted(CASES))
def test_gradcheck_float32(op):
    errs = [G.check(fn, arrays, seed=i) for i, (fn, arrays) in enumerate(CASES[op])]
    assert len(errs) >= 20
    assert max(errs) <= 1e-3


@pytest.mark.parametrize("op", ["conv1d", "batch_norm_train", "se_attention", "bce_with_logits",
                                "bottleneck_projection"])
def test_gradcheck_float64(op):
    errs = [G.check(fn, arrays, seed=i, dtype=np.float64) for i, (fn, arrays) in enumerate(CASES[op])]
    assert max(errs) <= 1e-6


def test_gradcheck_tiny_model():
    errs = [G.check(fn, arrays, seed=i, coords=c) for i, (fn, arrays, c) in enumerate(G.model_cases(5, n=6))]
    assert max(errs) <= 1e-3


def test_gradcheck_block_spec_shape():
    cfg = BlockConfig(4, 4, 4, kernel=3, groups=2, se_reduction=2)
    rng = np.random.default_rng(0)
    names = ["reduce.w", "reduce.b", "bn1.gamma", "bn1.beta", "grouped.w", "grouped.b",
             "bn2.gamma", "bn2.beta", "expand.w", "expand.b", "se.w1", "se.w2"]
    shapes = [(4, 4, 1), (4,), (4,), (4,), (4, 2, 3), (4,), (4,), (4,), (4, 4, 1), (4,), (2, 4), (4, 2)]
    arrays = [rng.standard_normal((1, 4, 16))] + [rng.standard_normal(s) * 0.5 + 0.1 for s in shapes]

    def fn(x, *ps):
        t = {f"b.{n}": p for n, p in zip(names, ps)}
        buf = {f"b.bn{k}.{s}": (np.zeros(4) if s == "mean" else np.ones(4)) for k in (1, 2) for s in ("mean", "var")}
        return bottleneck_block(x, cfg, t, buf, "b", training=True)
    assert G.check(fn, arrays) <= 1e-3


def test_se_attention_gradient_wrt_w1():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 6))
    w1 = rng.standard_normal((2, 4))
    w2 = rng.standard_normal((4, 2))
    fn = lambda w: E.se_attention(Tensor(x), w, Tensor(w2))
    assert G.check(fn, [w1], dtype=np.float64) <= 1e-4


# --- op semantics -----------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 9))
    w = np.zeros((3, 3, 1))
    w[range(3), range(3), 0] = 1.0
    out = E.conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data
    assert np.array_equal(out, x)


def test_conv_average_constant_interior():
    x = np.full((1, 1, 10), 2.5)
    out = E.conv1d(Tensor(x), Tensor(np.full((1, 1, 3), 1 / 3))).data[0, 0]
    assert np.allclose(out[1:-1], 2.5, atol=1e-15)


@pytest.mark.parametrize("bsz,cin,cout,length,k,stride,groups", [
    (2, 4, 4, 8, 3, 1, 2), (1, 6, 3, 11, 5, 2, 3), (3, 2, 4, 7, 1, 3, 1), (2, 8, 8, 5, 7, 1, 8),
    (1, 3, 6, 13, 3, 2, 3), (2, 4, 2, 1, 3, 1, 2),
])
def test_conv_matches_loop_oracle(bsz, cin, cout, length, k, stride, groups):
    rng = np.random.default_rng(length * k)
    x = rng.standard_normal((bsz, cin, length))
    w = rng.standard_normal((cout, cin // groups, k))
    b = rng.standard_normal(cout)
    out = E.conv1d(Tensor(x), Tensor(w), Tensor(b), stride, groups).data
    assert out.shape == (bsz, cout, math.ceil(length / stride))
    assert np.abs(out - conv1d_loops(x, w, b, stride, groups)).max() <= 1e-12


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        E.conv1d(Tensor(np.zeros((1, 4, 8))), Tensor(np.zeros((2, 3, 3))))
    with pytest.raises(ShapeError):
        E.conv1d(Tensor(np.zeros((1, 4, 8))), Tensor(np.zeros((2, 4, 2))))


def test_se_zero_weights_half_gate():
    x = np.random.default_rng(1).standard_normal((2, 4, 5))
    out = E.se_attention(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(np.zeros((4, 2)))).data
    assert np.allclose(out, 0.5 * x, atol=1e-15)


def test_se_constant_channel_closed_form():
    c, w1, w2 = 1.7, 0.8, -1.3
    out = E.se_attention(Tensor(np.full((1, 1, 6), c)), Tensor([[w1]]), Tensor([[w2]])).data
    gate = 1 / (1 + math.exp(-w2 * max(w1 * c, 0)))
    assert np.allclose(out, gate * c, atol=1e-15)


def test_bce_values():
    assert float(E.bce_with_logits(Tensor([[0.0]]), [[1.0]]).data) == pytest.approx(math.log(2))
    assert float(E.bce_with_logits(Tensor([[30.0]]), [[1.0]]).data) < 1e-12
    rng = np.random.default_rng(2)
    z = rng.standard_normal((7, 3)) * 4
    y = (rng.uniform(size=(7, 3)) < 0.5).astype(float)
    p = 1 / (1 + np.exp(-z.astype(np.longdouble)))
    naive = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(float(E.bce_with_logits(Tensor(z), y).data) - float(naive)) <= 1e-12


def test_bce_non_negative_and_saturates():
    z = np.linspace(-50, 50, 101)[:, None]
    for y in (0.0, 1.0):
        loss = np.array([float(E.bce_with_logits(Tensor(v[None]), [[y]]).data) for v in z])
        assert np.all(loss >= 0)
    assert float(E.bce_with_logits(Tensor([[-40.0]]), [[0.0]]).data) < 1e-15


def test_batch_norm_running_stats():
    x = np.random.default_rng(4).standard_normal((4, 2, 10)) * 3 + 1
    rm, rv = np.zeros(2), np.ones(2)
    E.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2)))
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))
    out = E.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False).data
    assert np.allclose(out, (x - rm[None, :, None]) / np.sqrt(rv[None, :, None] + 1e-5))


# --- model ------------------------------------------------------------------

def test_zero_expand_identity_block_is_relu():
    cfg = BlockConfig(4, 4, 4, kernel=3, groups=2, se_reduction=2)
    rng = np.random.default_rng(5)
    t = {
        "b.reduce.w": rng.standard_normal((4, 4, 1)), "b.reduce.b": np.zeros(4),
        "b.bn1.gamma": np.ones(4), "b.bn1.beta": np.zeros(4),
        "b.grouped.w": rng.standard_normal((4, 2, 3)), "b.grouped.b": np.zeros(4),
        "b.bn2.gamma": np.ones(4), "b.bn2.beta": np.zeros(4),
        "b.expand.w": np.zeros((4, 4, 1)), "b.expand.b": np.zeros(4),
        "b.se.w1": rng.standard_normal((2, 4)), "b.se.w2": rng.standard_normal((4, 2)),
    }
    buf = {f"b.bn{k}.{s}": (np.zeros(4) if s == "mean" else np.ones(4)) for k in (1, 2) for s in ("mean", "var")}
    x = rng.standard_normal((2, 4, 9))
    out = bottleneck_block(Tensor(x), cfg, {k: Tensor(v) for k, v in t.items()}, buf, "b", False).data
    assert np.array_equal(out, np.maximum(x, 0))


@pytest.mark.parametrize("length,stride", [(16, 2), (15, 2), (9, 3), (8, 1)])
def test_block_output_length(length, stride):
    cfg = BlockConfig(4, 4, 8, kernel=3, stride=stride, groups=2, se_reduction=2)
    mp_cfg = ModelConfig(n_leads=4, stem_ch=4, stem_kernel=1, stem_stride=1, blocks=[cfg], head_dim=1)
    mp = init_params(mp_cfg, seed=0, dtype=np.float64)
    t = {k: Tensor(v) for k, v in mp.params.items()}
    out = bottleneck_block(Tensor(np.ones((1, 4, length))), cfg, t, mp.buffers, "blocks.0", False)
    assert out.shape == (1, 8, math.ceil(length / stride))


def test_default_model_shape_and_determinism():
    mp = init_params(ModelConfig(head_dim=5), seed=0)
    x = np.random.default_rng(0).standard_normal((8, 12, 5000)).astype(np.float32)
    a = model_forward(x, mp).data
    b = model_forward(x, mp).data
    assert a.shape == (8, 5)
    assert a.tobytes() == b.tobytes()


def test_wrong_lead_count():
    mp = init_params(tiny_config(n_leads=2), seed=0)
    with pytest.raises(ShapeError):
        model_forward(np.zeros((1, 3, 32), np.float32), mp)


def test_config_validation():
    with pytest.raises(ValueError):
        BlockConfig(4, 6, 4, groups=4)
    with pytest.raises(ValueError):
        BlockConfig(4, 4, 4, kernel=4)
    with pytest.raises(ValueError):
        ModelConfig(stem_ch=8)  # first default block expects 16 channels
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.feature_dim == 32


def test_init_scheme():
    mp = init_params(ModelConfig(head_dim=2), seed=1)
    w = mp.params["stem.w"]
    bound = math.sqrt(6 / (12 * 15))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound
    assert np.all(mp.params["stem.b"] == 0)
    assert np.all(mp.params["stem.bn.gamma"] == 1) and np.all(mp.params["stem.bn.beta"] == 0)
    assert mp.params["head.w"].shape == (32, 2)


# --- optimizer ----------------------------------------------------------------

def test_adamw_zero_grad_no_decay():
    p = {"w": np.array([1.5, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, {}, 1, lr=0.1, wd=0.0)
    assert p["w"].tolist() == [1.5, -2.0]


def test_adamw_decay_closed_form():
    p = {"w": np.array([2.0])}
    adamw_step(p, {"w": np.zeros(1)}, {}, 1, lr=0.1, wd=0.01)
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), abs=1e-15)


@pytest.mark.parametrize("wd", [0.0, 0.05])
def test_adamw_first_step(wd):
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([1.0])}, {}, 1, lr=0.1, wd=wd)
    assert p["w"][0] == pytest.approx(1 - 0.1 * wd - 0.1 / (1 + 1e-8), abs=1e-12)


def test_adamw_non_finite_gradient():
    p = {"w": np.array([1.0])}
    with pytest.raises(TrainingError, match="non-finite"):
        adamw_step(p, {"w": np.array([np.nan])}, {}, 1, 0.1, 0.0)
    assert p["w"][0] == 1.0


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1e-4) == 1e-4
    assert cosine_lr(100, 100, 1e-4) == pytest.approx(0, abs=1e-20)
    assert cosine_lr(50, 100, 1e-4) == pytest.approx(5e-5)


def test_early_stopping_patience():
    stopper = EarlyStopping(5)
    losses = [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99]
    stops = [stopper.update(e, v) for e, v in enumerate(losses, 1)]
    assert stops == [False] * 6 + [True]
    assert stopper.best_epoch == 2


def test_early_stopping_decreasing_runs_to_end():
    stopper = EarlyStopping(5)
    assert not any(stopper.update(e, 1 / e) for e in range(1, 31))
    assert stopper.best_epoch == 30


# --- training and fine-tuning ---------------------------------------------

def _toy_data(n, seed, length=32):
    rng = np.random.default_rng(seed)
    y = (rng.uniform(size=(n, 2)) < 0.5).astype(np.float32)
    x = rng.standard_normal((n, 2, length)).astype(np.float32) * 0.5
    x[:, 0] += y[:, :1] * np.sin(np.linspace(0, 6 * np.pi, length))[None].astype(np.float32)
    x[:, 1] += y[:, 1:] * 0.8
    return x, y


def test_train_returns_best_epoch():
    tr, va = _toy_data(64, 0), _toy_data(32, 1)
    snaps = {}
    cfg = TrainConfig(lr0=3e-3, epochs=6, batch_size=16, patience=2, seed=0)
    best, hist = train(tr, va, tiny_config(head_dim=2), cfg,
                       on_epoch=lambda e, mp, row: snaps.__setitem__(e, mp.copy()))
    vals = [r["val_loss"] for r in hist.rows]
    assert hist.best_epoch == 1 + int(np.argmin(vals))
    ref = snaps[hist.best_epoch]
    assert all(np.array_equal(best.params[k], ref.params[k]) for k in ref.params)
    assert min(vals) < vals[0] or hist.best_epoch == 1
    assert [r["epoch"] for r in hist.rows] == list(range(1, len(hist.rows) + 1))


def test_train_bit_reproducible():
    tr, va = _toy_data(40, 2), _toy_data(16, 3)
    cfg = TrainConfig(lr0=1e-3, epochs=2, batch_size=16, patience=2, seed=4)
    a, ha = train(tr, va, tiny_config(head_dim=2), cfg)
    b, hb = train(tr, va, tiny_config(head_dim=2), cfg)
    assert ha.rows == hb.rows
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_train_learns_toy_signal():
    from ecgprofile.metrics import auroc
    tr, va, te = _toy_data(256, 5), _toy_data(64, 6), _toy_data(128, 7)
    cfg = TrainConfig(lr0=1e-2, epochs=15, batch_size=32, patience=5, seed=0)
    best, _ = train(tr, va, tiny_config(head_dim=2), cfg)
    p = predict_proba(best, te[0])
    assert auroc(p[:, 1], te[1][:, 1]) > 0.9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_keeps_last_good():
    tr, va = _toy_data(32, 8), _toy_data(16, 9)
    x = tr[0].copy()
    x[5, 0, 3] = np.inf
    best, hist = train((x, tr[1]), va, tiny_config(head_dim=2),
                       TrainConfig(epochs=3, batch_size=32, patience=2))
    assert hist.stopped.startswith("diverged")
    assert all(np.all(np.isfinite(v)) for v in best.params.values())


def test_train_label_width_mismatch():
    tr, va = _toy_data(16, 0), _toy_data(8, 1)
    with pytest.raises(ValueError):
        train(tr, va, tiny_config(head_dim=3), TrainConfig(epochs=1, patience=1))


def test_history_csv(tmp_path):
    h = History()
    h.rows = [{"epoch": 1, "train_loss": 0.5, "val_loss": 0.4, "lr": 1e-4}]
    h.write_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,lr"


def test_finetune_copies_backbone():
    pre = init_params(tiny_config(head_dim=3), seed=1)
    pre.opt_state["stem.w"] = (np.ones(1), np.ones(1))
    pre.step = 17
    ft = finetune(pre, 5, seed=2)
    for k in pre.backbone_names():
        assert ft.params[k].tobytes() == pre.params[k].tobytes()
    assert ft.params["head.w"].shape == (pre.config.feature_dim, 5)
    assert ft.config.head_dim == 5
    assert ft.opt_state == {} and ft.step == 0
    assert all(np.array_equal(ft.buffers[k], pre.buffers[k]) for k in pre.buffers)


def test_finetune_shape_mismatch():
    pre = init_params(tiny_config(n_leads=2), seed=1)
    with pytest.raises(ValueError, match="backbone mismatch"):
        finetune(pre, 2, config=tiny_config(n_leads=3))


# --- checkpoint ---------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    mp = init_params(tiny_config(), seed=3)
    mp.buffers["stem.bn.mean"][:] = [0.1, 0.2, 0.3, 0.4]
    path = save_checkpoint(mp, tmp_path / "m.ckpt")
    assert path.read_bytes()[:8] == b"ECGPCKPT"
    back = load_checkpoint(path)
    assert back.config == mp.config
    assert all(back.params[k].tobytes() == mp.params[k].tobytes() for k in mp.params)
    assert np.allclose(back.buffers["stem.bn.mean"], [0.1, 0.2, 0.3, 0.4], atol=1e-7)
    x = np.random.default_rng(0).standard_normal((2, 2, 32)).astype(np.float32)
    assert np.allclose(predict_proba(back, x), predict_proba(mp, x), atol=1e-6)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    mp = init_params(tiny_config(), seed=3)
    good = save_checkpoint(mp, tmp_path / "m.ckpt").read_bytes()
    p.write_bytes(good[:-7])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
