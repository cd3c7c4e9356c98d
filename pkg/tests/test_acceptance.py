"""Acceptance criteria 1-9. Each test records one pass/fail line for the summary."""

import json
import time

import numpy as np
import pytest

import signnet.optim as O
from conftest import ACCEPTANCE_LINES
from signnet import model as M
from signnet import streaming as S
from signnet.checkpoint import CheckpointMeta, decode, encode, load_checkpoint
from signnet.config import RunConfig
from signnet.data import Clip, decode_clip, encode_clip, eval_transform, load_clip, read_manifest, synth_generate
from signnet.errors import ConfigError, FormatError
from signnet.gradcheck import run_gradient_suite
from signnet.metrics import binary_auc, confusion, precision_recall_f1
from signnet.tensor import Rng


def _record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    assert ok, detail


def test_criterion_1_architecture_params():
    c = M.param_count(M.ModelConfig.full())
    got = (c["conv1"], c["conv2"], c["conv3"], c["fc1"])
    dev = abs(c["lstm"] - 408e6) / 408e6
    ok = got == (5248, 221312, 884992, 131328) and c["lstm"] == 414_195_712 and dev <= 0.02
    _record(1, ok, f"conv/fc1 params {got}, lstm {c['lstm']:,} ({dev:.2%} from ~408M)")


def test_criterion_2_shapes():
    want = [
        ("input", ("B", 3, 30, 224, 224)),
        ("conv1", ("B", 64, 30, 112, 112)),
        ("conv2", ("B", 128, 30, 56, 56)),
        ("conv3", ("B", 256, 30, 28, 28)),
        ("lstm", ("B", 30, 512)),
        ("classifier", ("B", 100)),
    ]
    got = [(n, tuple(s)) for n, s in M.infer_shapes(M.ModelConfig.full())]
    _record(2, got == want, f"{len(got)} shape rows, T=30 preserved, lstm {dict(got)['lstm']}")


def test_criterion_3_gradients():
    start = time.perf_counter()
    results = run_gradient_suite(seed=0, coords=20, include_model=True)
    elapsed = time.perf_counter() - start
    names = {r.name for r in results}
    layer_worst = max(r.max_rel_error for r in results if r.name != "model")
    model_worst = next(r.max_rel_error for r in results if r.name == "model")
    ok = (all(r.passed for r in results) and all(r.coords >= 20 for r in results)
          and layer_worst <= 1e-4 and model_worst <= 1e-3 and elapsed < 120 and len(names) >= 7)
    _record(3, ok, f"layer max rel err {layer_worst:.2e}, desk composite {model_worst:.2e}, "
                   f"{elapsed:.1f}s")


@pytest.fixture(scope="module")
def five_by_twenty(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth5x20")
    synth_generate(5, 20, 16, 32, 32, 1, out)
    return out / "manifest.jsonl"


def test_criterion_4_learning(five_by_twenty, tmp_path):
    cfg = M.ModelConfig()
    records = read_manifest(five_by_twenty)
    pick = [next(r for r in records if r.label == k) for k in (0, 1)]
    x = np.stack([eval_transform(load_clip(r.path), cfg) for r in pick])
    y = np.array([r.label for r in pick])
    model = M.build(cfg, Rng(0))
    losses = O.overfit_batch(model, x, y, steps=200)
    first = next((i + 1 for i, v in enumerate(losses) if v < 0.01), None)

    start = time.perf_counter()
    run = RunConfig(model=cfg, lr=1e-3, batch_size=2, split_ratio=0.8, max_epochs=30)
    _, history = O.train(run, five_by_twenty, 0, tmp_path)
    minutes = (time.perf_counter() - start) / 60
    best = max(r.val_acc for r in history.records)
    ok = first is not None and best >= 0.9 and len(history) <= 30 and minutes <= 15
    _record(4, ok, f"overfit loss < 0.01 at step {first}; synthetic 5-class val acc {best:.2f} "
                   f"in {len(history)} epochs, {minutes:.1f} min")


def _pairs_auc(scores, positive):
    pos, neg = scores[positive], scores[~positive]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(5)
    prf_ok = True
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        n = int(rng.integers(1, 50))
        t, p = rng.integers(0, k, n), rng.integers(0, k, n)
        rows = precision_recall_f1(confusion(t, p, k))
        for c in range(k):
            tp = int(np.sum((t == c) & (p == c)))
            npred, nact = int(np.sum(p == c)), int(np.sum(t == c))
            prec = tp / npred if npred else 0.0
            rec = tp / nact if nact else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            prf_ok &= (rows[c].precision, rows[c].recall, rows[c].f1, rows[c].support) == (prec, rec, f1, nact)
    worst = 0.0
    for _ in range(300):
        n = int(rng.integers(2, 201))
        scores = rng.integers(0, 10, n) / 10.0
        positive = rng.random(n) < 0.4
        if positive.all() or not positive.any():
            continue
        worst = max(worst, abs(binary_auc(scores, positive) - _pairs_auc(scores, positive)))
    _record(5, prf_ok and worst <= 1e-9, f"P/R/F1 exact on 1000 vectors; AUC max |diff| {worst:.1e}")


def test_criterion_6_schedule_traces(synth_small, tmp_path, monkeypatch):
    s = O.PlateauScheduler(lr=1e-3)
    lrs = [s.step(v) for v in [1.0, 0.9, 0.91, 0.92, 0.93, 0.94]]
    drop_at = next(i for i, v in enumerate(lrs) if v < 1e-3)
    e = O.EarlyStopper(10)
    stop_at = [e.step(0.5) for _ in range(20)].index("stop") + 1

    vals = iter(np.linspace(2.0, 0.1, 500))
    monkeypatch.setattr(O, "validate", lambda model, records, config: (float(next(vals)), 0.5))
    monkeypatch.setattr(O, "train_step", lambda *a, **k: 1.0)
    small = M.ModelConfig(conv_channels=[2, 2, 2], lstm_hidden=4, fc_hidden=4, num_classes=3,
                          frames=4, height=16, width=16)
    _, history = O.train(RunConfig(model=small), synth_small / "manifest.jsonl", 0, tmp_path)
    try:
        RunConfig(max_epochs=101).validate()
        cap_enforced = False
    except ConfigError:
        cap_enforced = True
    # index 5 is the 4th consecutive epoch without improvement over 0.9
    ok = drop_at == 5 and lrs[5] == pytest.approx(1e-4) and stop_at == 11 \
        and len(history) == 100 and cap_enforced
    _record(6, ok, f"lr drop at epoch {drop_at + 1}, early stop at epoch {stop_at}, "
                   f"cap run ended at {len(history)} epochs")


def test_criterion_7_streaming(synth_small):
    model = M.build(M.ModelConfig(num_classes=3), Rng(0))
    record = read_manifest(synth_small / "manifest.jsonl")[0]
    clip = load_clip(record.path)
    preds = S.stream_frames(list(clip.frames), model, stride=8, window=16)
    offline, _ = M.forward(model, eval_transform(clip, model.config)[None], "eval")
    diff = float(np.max(np.abs(preds[0].logits - offline[0])))

    counts_ok = True
    frames = [clip.frames[0]] * 40
    for n, w, s in [(16, 16, 8), (32, 16, 16), (40, 16, 8), (40, 10, 3), (15, 16, 8)]:
        got = len(S.stream_frames(frames[:n], model, stride=s, window=w))
        counts_ok &= got == (1 + (n - w) // s if n >= w else 0)
    latency = max(p.latency_ms for p in S.stream_frames(frames, model, stride=4))
    ok = len(preds) == 1 and diff <= 1e-6 and counts_ok and latency < 1000
    _record(7, ok, f"stream vs offline logits max diff {diff:.1e}, count formula holds, "
                   f"max window latency {latency:.1f} ms")


def test_criterion_8_determinism(synth_small, tmp_path):
    run = RunConfig(model=M.ModelConfig(num_classes=3), max_epochs=2)
    outs = []
    for name in ("a", "b"):
        O.train(run, synth_small / "manifest.jsonl", 11, tmp_path / name)
        outs.append(((tmp_path / name / "history.json").read_bytes(),
                     (tmp_path / name / "best.slck").read_bytes()))
    same = outs[0] == outs[1]
    model, _ = load_checkpoint(tmp_path / "a" / "best.slck")
    again, _ = decode(encode(model, CheckpointMeta(2, 0.0, [])))
    bitwise = all(model.params[k].tobytes() == again.params[k].tobytes() for k in model.params)
    x = eval_transform(load_clip(read_manifest(synth_small / "manifest.jsonl")[0].path), model.config)[None]
    logits_exact = M.forward(model, x)[0].tobytes() == M.forward(again, x)[0].tobytes()
    epochs = len(json.loads(outs[0][0]))
    _record(8, same and bitwise and logits_exact,
            f"history.json and best.slck byte-identical over {epochs} epochs; round trip bitwise")


def _all_prefixes_rejected(data: bytes, fn) -> bool:
    for cut in range(len(data)):
        try:
            fn(data[:cut])
        except FormatError as exc:
            if not (0 <= exc.offset <= cut and f"offset {exc.offset}" in str(exc)):
                return False
        else:
            return False
    return True


def test_criterion_9_format_robustness():
    frames = (Rng(0).uniform(2 * 4 * 4 * 3) * 255).astype(np.uint8).reshape(2, 4, 4, 3)
    clip_bytes = encode_clip(Clip(frames, 25.0))
    tiny = M.ModelConfig(conv_channels=[1, 1, 1], lstm_hidden=1, fc_hidden=1, num_classes=2,
                         frames=1, height=8, width=8)
    ckpt_bytes = encode(M.build(tiny, Rng(0)), CheckpointMeta(1, 0.5, ["A", "B"]))
    truncations = (_all_prefixes_rejected(clip_bytes, decode_clip)
                   and _all_prefixes_rejected(ckpt_bytes, decode))

    corrupt_ok = True
    for data, fn, at in [(clip_bytes, decode_clip, 0), (ckpt_bytes, decode, 0), (ckpt_bytes, decode, 4)]:
        bad = bytearray(data)
        bad[at] ^= 0xFF
        try:
            fn(bytes(bad))
            corrupt_ok = False
        except FormatError as exc:
            corrupt_ok &= exc.offset == at
    for data, fn in [(clip_bytes, decode_clip), (ckpt_bytes, decode)]:
        try:
            fn(data + b"\x00")
            corrupt_ok = False
        except FormatError as exc:
            corrupt_ok &= exc.offset == len(data)
    _record(9, truncations and corrupt_ok,
            f"all {len(clip_bytes)} SLRC and {len(ckpt_bytes)} SLCK truncations rejected with offsets; "
            f"corrupt headers and trailing bytes located")
