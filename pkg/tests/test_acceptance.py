"""End-to-end acceptance gates for the package.

One test per gate, in rough dependency order: corridor closed forms,
gradient correctness, Mallows calculus, the segmentation joint plus its
sampler, the TC measure, synthetic segmentation recovery, RSD pipeline
ordering, CLI determinism and serialization. Each test finishes by
printing a single summary line with its measured numbers, so the pytest
log of a run doubles as an acceptance report. Wall-clock budgets are
asserted where a gate carries one; run this file with `-s` to see the
summary lines as they appear.
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from conftest import finite_difference_grads, grad_rel_error, make_video
from test_temporal import all_segmentations, oracle_log_joint

from segrsd.appearance import (
    TrainConfig,
    cross_entropy_loss_and_grads,
    forward,
    init_appearance,
    temporal_coherence_loss_and_grads,
)
from segrsd.cli import main
from segrsd.core import Corpus, Segmentation, VideoSequence
from segrsd.data_io import (
    SynthConfig,
    load_corpus,
    load_rsd_checkpoint,
    load_seg_checkpoint,
    load_video,
    save_corpus,
    save_seg_checkpoint,
    save_video,
    synth_generate,
)
from segrsd.errors import (
    BadMagicError,
    DataFormatError,
    MissingFileError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionError,
)
from segrsd.rsd import (
    AuxInit,
    CorridorParams,
    PipelineMode,
    corr_smooth_l1,
    corridor_border,
    corridor_weight,
    default_train_config,
    init_rsd,
    mae_of,
    naive_prediction,
    rsd_forward,
    rsd_loss_and_grads,
    smooth_l1,
    train_rsd,
)
from segrsd.segtrain import (
    SegTrainConfig,
    run,
    select_checkpoint,
    tc_from_labels,
    tc_measure,
)
from segrsd.temporal import (
    LengthModel,
    MallowsModel,
    estimate_rho,
    inversions_to_order,
    mallows_log_prob,
    mallows_sample,
    order_to_inversions,
    sample_segmentation,
    segmentation_log_joint,
    truncated_geometric_mean,
)


def _summary(line: str) -> None:
    print(f"ACCEPT {line}")


def test_01_corridor_closed_forms():
    t0 = time.monotonic()
    params = CorridorParams(t_median=40.0)
    t, gt, y = 20.0, 40.0, 36.0

    c = corridor_border(t, gt, params)
    pi = corridor_weight(y, t, gt, params)
    loss = corr_smooth_l1(y, t, gt, params)
    assert c == pytest.approx(33.6452, abs=1e-3)
    assert pi == pytest.approx(0.39619, abs=1e-4)
    assert loss == pytest.approx(0.0079239, abs=1e-6)

    assert corridor_weight(gt, t, gt, params) == 0.0
    assert corridor_weight(c, t, gt, params) == 1.0

    rng = np.random.default_rng(0)
    n = 1_000_000
    ts = rng.uniform(0.0, 100.0, n)
    gts = rng.uniform(0.01, 100.0, n)
    ys = rng.uniform(-20.0, 140.0, n)
    corr = corr_smooth_l1(ys, ts, gts, params)
    plain = smooth_l1(params.scale * ys, params.scale * gts, params.beta)
    assert np.all(corr <= plain)

    elapsed = time.monotonic() - t0
    assert elapsed < 1.0
    _summary(
        f"corridor closed forms: c={c:.6f} pi={pi:.6f} loss={loss:.9f} "
        f"corr<=plain on {n} samples [{elapsed:.2f}s]"
    )


def test_02_gradient_suite():
    t0 = time.monotonic()
    tol = 1e-4
    checked = 0
    worst = 0.0

    for seed in range(6):
        rng = np.random.default_rng(100 + seed)
        params = init_appearance(rng, 3, [4], 3, 0.9)
        feats = rng.standard_normal((6, 3))
        labels = rng.integers(0, 3, 6)
        _, grads = cross_entropy_loss_and_grads(params, feats, labels)
        num = finite_difference_grads(
            lambda: cross_entropy_loss_and_grads(params, feats, labels)[0],
            params.layers,
        )
        worst = max(worst, grad_rel_error(grads, num))
        checked += 1

    for seed in range(6):
        rng = np.random.default_rng(200 + seed)
        params = init_appearance(rng, 3, [4], 3, 0.9)
        feats = rng.standard_normal((7, 3))
        pairs = np.array([[0, 5], [1, 6], [2, 4]])
        _, grads = temporal_coherence_loss_and_grads(params, feats, pairs, margin=1.0)
        num = finite_difference_grads(
            lambda: temporal_coherence_loss_and_grads(params, feats, pairs, margin=1.0)[0],
            params.layers[:-1],
        )
        worst = max(worst, grad_rel_error(grads, num))
        checked += 1

    corridor = CorridorParams(t_median=5.0)
    for seed in range(5):
        rng = np.random.default_rng(300 + seed)
        params = init_rsd(rng, 3, hidden_dim=4, head_dim=3, output_scale=corridor.scale)
        video = make_video(n_frames=6, n_features=3, seed=400 + seed, period=30.0)
        _, grads = rsd_loss_and_grads(params, video, "smoothl1", corridor)
        num = finite_difference_grads(
            lambda: rsd_loss_and_grads(params, video, "smoothl1", corridor)[0],
            params.layer_list(),
        )
        worst = max(worst, grad_rel_error(grads, num))
        checked += 1

    for seed in range(5):
        rng = np.random.default_rng(500 + seed)
        params = init_rsd(rng, 3, hidden_dim=4, head_dim=3, output_scale=corridor.scale)
        video = make_video(n_frames=6, n_features=3, seed=600 + seed, period=30.0)
        elapsed_min = video.elapsed_min()
        remaining = video.remaining_min()
        # the corridor weight carries no gradient, so the finite-difference
        # oracle freezes pi at the base parameters
        pi0 = corridor_weight(
            rsd_forward(params, video), elapsed_min, remaining, corridor
        )

        def frozen_loss():
            scaled = params.output_scale * rsd_forward(params, video)
            target = corridor.scale * remaining
            return float(np.mean(pi0 * smooth_l1(scaled, target, corridor.beta)))

        loss, grads = rsd_loss_and_grads(params, video, "corr", corridor)
        assert loss == pytest.approx(frozen_loss(), rel=1e-12)
        num = finite_difference_grads(frozen_loss, params.layer_list())
        worst = max(worst, grad_rel_error(grads, num))
        checked += 1

    assert checked >= 20
    assert worst < tol
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    _summary(
        f"gradient suite: {checked} instances, worst rel error {worst:.2e} "
        f"[{elapsed:.2f}s]"
    )


def test_03_mallows_calculus():
    t0 = time.monotonic()

    worst_norm = 0.0
    for k in range(2, 6):
        model = MallowsModel.with_constant_rho(k, 0.8)
        total = 0.0
        slots = [range(k - i) for i in range(k - 1)]
        for v in itertools.product(*slots):
            total += math.exp(mallows_log_prob(np.array(v), model))
        worst_norm = max(worst_norm, abs(total - 1.0))
    assert worst_norm < 1e-8

    for k in range(2, 6):
        for perm in itertools.permutations(range(k)):
            v = order_to_inversions(perm)
            assert inversions_to_order(v) == perm

    model = MallowsModel.with_constant_rho(5, 1.5)
    rng = np.random.default_rng(20260817)
    draws = np.array([mallows_sample(model, rng) for _ in range(100_000)])
    worst_z = 0.0
    for i in range(4):
        se = draws[:, i].std(ddof=1) / math.sqrt(len(draws))
        truth = truncated_geometric_mean(1.5, 5 - i)
        worst_z = max(worst_z, abs(draws[:, i].mean() - truth) / se)
    assert worst_z < 3.0

    recovered = estimate_rho(draws[:10_000], model)
    dev = float(np.abs(recovered - 1.5).max())
    assert dev < 0.1

    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    _summary(
        f"mallows calculus: norm err {worst_norm:.1e}, round trips K<=5, "
        f"slot z max {worst_z:.2f}, rho dev {dev:.3f} [{elapsed:.1f}s]"
    )


def test_04_segmentation_joint_and_posterior():
    t0 = time.monotonic()
    rng = np.random.default_rng(12)
    probs = rng.dirichlet(np.ones(2), size=6)
    mallows = MallowsModel.with_constant_rho(2, 0.5)
    lengths = LengthModel.uniform(2)
    states = all_segmentations(6, 2)

    worst = 0.0
    log_post = np.zeros(len(states))
    for i, seg in enumerate(states):
        log_post[i] = segmentation_log_joint(seg, probs, mallows, lengths)
        oracle = oracle_log_joint(seg, probs, mallows.rho, lengths.theta)
        worst = max(worst, abs(log_post[i] - oracle))
    assert worst < 1e-10

    post = np.exp(log_post - log_post.max())
    post /= post.sum()
    index = {s: i for i, s in enumerate(states)}
    chain_rng = np.random.default_rng(13)
    current = Segmentation(((0, 3), (1, 3)), 2)
    for _ in range(2_000):
        current = sample_segmentation(probs, mallows, lengths, current, chain_rng, sweeps=1)
    counts = np.zeros(len(states))
    for _ in range(40_000):
        current = sample_segmentation(probs, mallows, lengths, current, chain_rng, sweeps=1)
        counts[index[current]] += 1
    tv = 0.5 * float(np.abs(counts / counts.sum() - post).sum())
    assert tv <= 0.05

    elapsed = time.monotonic() - t0
    assert elapsed < 120.0
    _summary(
        f"joint and posterior: oracle gap {worst:.1e} over {len(states)} states, "
        f"chain TV {tv:.4f} [{elapsed:.1f}s]"
    )


def _brute_tc(labels: np.ndarray, k: int) -> float:
    """Best framewise agreement over every coherent layout of the labels."""
    present = sorted(set(labels.tolist()))
    counts = {p: int((labels == p).sum()) for p in present}
    best = -1.0
    for perm in itertools.permutations(present):
        blocks = np.concatenate(
            [np.full(counts[p], p, dtype=np.int64) for p in perm]
        )
        best = max(best, float((blocks == labels).mean()))
    return best


def test_05_tc_measure_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        n_frames = int(rng.integers(4, 31))
        labels = rng.integers(0, k, n_frames)
        assert tc_from_labels([labels], k) == _brute_tc(labels, k)

    # same brute force through the model-facing entry point
    params = init_appearance(np.random.default_rng(7), 4, [5], 3, 0.9)
    videos = [make_video(f"v{i}", n_frames=12 + i, seed=50 + i) for i in range(3)]
    preds = [forward(params, v).argmax(axis=1) for v in videos]
    expect = float(np.mean([_brute_tc(p, 3) for p in preds]))
    assert tc_measure(params, videos) == pytest.approx(expect, abs=1e-12)
    _summary("tc measure: 100 random sequences match brute force exactly")


def _pooled_hungarian(labels: dict, refs: dict, k: int) -> float:
    """One-to-one assignment accuracy on the pooled confusion matrix."""
    pred = np.concatenate([labels[v] for v in sorted(labels)])
    ref = np.concatenate([refs[v] for v in sorted(labels)])
    conf = np.zeros((k, k))
    for p, r in zip(pred, ref):
        conf[p, r] += 1
    rows, cols = linear_sum_assignment(-conf)
    return float(conf[rows, cols].sum() / len(pred))


def test_06_synthetic_segmentation_recovery():
    t0 = time.monotonic()
    cfg = SynthConfig(
        n_videos=20,
        k_true=5,
        n_features=12,
        duration_mean_min=10.0 / 3.0,
        duration_jitter=0.5,
        cluster_separation=4.0,
        noise_sigma=1.0,
        skip_prob=0.0,
        order_rho=8.0,
        seed=0,
    )
    corpus, _ = synth_generate(cfg)
    train_cfg = SegTrainConfig(
        n_subactivities=5, iterations=8, selection_window=(6, 8), seed=0
    )
    chosen = select_checkpoint(run(corpus, train_cfg, verbose=False), (6, 8))

    refs = {v.id: v.phase_labels for v in corpus.by_split("train")}
    acc = _pooled_hungarian(chosen.labels, refs, 5)
    assert acc >= 0.85
    assert chosen.tc_score >= 0.9

    elapsed = time.monotonic() - t0
    assert elapsed < 300.0
    _summary(
        f"segmentation recovery: hungarian acc {acc:.4f}, "
        f"tc {chosen.tc_score:.4f} (iteration {chosen.iteration}) [{elapsed:.1f}s]"
    )


def test_07_rsd_pipeline_ordering():
    t0 = time.monotonic()
    cfg = SynthConfig(
        n_videos=14,
        k_true=5,
        n_features=12,
        duration_mean_min=10.0 / 3.0,
        duration_jitter=0.8,
        cluster_separation=4.0,
        noise_sigma=1.5,
        skip_prob=0.0,
        order_rho=8.0,
        seed=0,
    )
    corpus, _ = synth_generate(cfg)
    train_cfg = SegTrainConfig(
        n_subactivities=5, iterations=8, selection_window=(6, 8), seed=0
    )
    chosen = select_checkpoint(run(corpus, train_cfg, verbose=False), (6, 8))
    init = AuxInit.from_checkpoint(chosen)
    corridor = CorridorParams.from_corpus(corpus)
    val = corpus.by_split("val")
    test = corpus.by_split("test")
    naive = float(
        np.mean(
            [
                np.mean(np.abs(naive_prediction(v.elapsed_min(), corridor) - v.remaining_min()))
                for v in test
            ]
        )
    )

    grid = (
        ("single", "single_task", "none", None, "smoothl1", 60),
        ("feature", "feature_extraction", "learned_seg", init, "smoothl1", 60),
        ("pretrain", "pretraining", "learned_seg", init, "smoothl1", 150),
        ("reg_sl1", "regularization", "learned_seg", init, "smoothl1", 60),
        ("reg_corr", "regularization", "learned_seg", init, "corr", 60),
    )
    seeds = (1, 2, 3, 4)
    val_mae, test_mae = {}, {}
    for name, pipeline, aux, aux_init, loss, epochs in grid:
        vs, ts = [], []
        for seed in seeds:
            base = default_train_config(pipeline, seed=seed)
            tc = TrainConfig(
                learning_rate=base.learning_rate,
                epochs=epochs,
                batch_size=base.batch_size,
                l2_weight=base.l2_weight,
                optimizer=base.optimizer,
                seed=seed,
            )
            params, _ = train_rsd(
                corpus,
                aux_init,
                PipelineMode(pipeline, aux),
                loss,
                tc,
                corridor,
                n_subactivities=5,
                verbose=False,
            )
            vs.append(mae_of(params, val))
            ts.append(mae_of(params, test))
        val_mae[name] = float(np.mean(vs))
        test_mae[name] = float(np.mean(ts))

    worst = max(test_mae.values())
    assert worst < naive, f"worst pipeline {worst:.3f} vs naive {naive:.3f}"
    assert val_mae["feature"] <= val_mae["single"], (
        f"feature {val_mae['feature']:.3f} vs single {val_mae['single']:.3f}"
    )
    assert test_mae["reg_corr"] <= test_mae["reg_sl1"], (
        f"corr {test_mae['reg_corr']:.3f} vs smoothl1 {test_mae['reg_sl1']:.3f}"
    )

    elapsed = time.monotonic() - t0
    assert elapsed < 900.0
    _summary(
        f"rsd ordering: naive {naive:.3f}, worst pipeline {worst:.3f}, "
        f"feature val {val_mae['feature']:.3f} <= single {val_mae['single']:.3f}, "
        f"corr test {test_mae['reg_corr']:.4f} <= smoothl1 {test_mae['reg_sl1']:.4f} "
        f"[{elapsed:.0f}s]"
    )


def test_08_cli_determinism(tmp_path):
    corpus = str(tmp_path / "corpus")
    assert main([
        "synth", "--out", corpus, "--videos", "8", "--k", "3", "--d", "4",
        "--duration-mean", "0.8", "--noise", "0.5", "--seed", "0",
    ]) == 0

    seg_args = lambda out: [
        "segment", "--corpus", corpus, "--out", out,
        "--k", "3", "--iterations", "2", "--select", "1:2", "--sweeps", "5",
        "--epochs", "2", "--hidden", "8", "--tc-epochs", "2", "--seed", "7",
    ]
    assert main(seg_args(str(tmp_path / "seg_a"))) == 0
    assert main(seg_args(str(tmp_path / "seg_b"))) == 0
    seg_a, seg_b = tmp_path / "seg_a", tmp_path / "seg_b"
    assert (seg_a / "segmentation.ckpt").read_bytes() == (seg_b / "segmentation.ckpt").read_bytes()
    assert (seg_a / "segment_report.txt").read_text() == (seg_b / "segment_report.txt").read_text()

    rsd_args = lambda out: [
        "train-rsd", "--corpus", corpus, "--out", out,
        "--pipeline", "regularize", "--aux", "uniform", "--loss", "corr",
        "--epochs", "3", "--hidden", "8", "--k", "3", "--seed", "5",
    ]
    assert main(rsd_args(str(tmp_path / "rsd_a"))) == 0
    assert main(rsd_args(str(tmp_path / "rsd_b"))) == 0
    rsd_a, rsd_b = tmp_path / "rsd_a", tmp_path / "rsd_b"
    ckpt = "rsd_regularize_uniform_corr.ckpt"
    report = "rsd_regularize_uniform_corr_report.txt"
    assert (rsd_a / ckpt).read_bytes() == (rsd_b / ckpt).read_bytes()
    assert (rsd_a / report).read_text() == (rsd_b / report).read_text()
    _summary("cli determinism: segment and train-rsd reruns byte-identical")


def test_09_serialization_round_trips(tmp_path):
    rng = np.random.default_rng(3)

    video = VideoSequence(
        id="v0",
        features=rng.standard_normal((9, 4)),
        frame_period_s=2.5,
        phase_labels=rng.integers(0, 3, 9),
    )
    save_video(video, tmp_path / "v0.npz")
    back = load_video(tmp_path / "v0.npz")
    assert back.features.tobytes() == video.features.tobytes()
    assert back.frame_period_s == video.frame_period_s
    assert np.array_equal(back.phase_labels, video.phase_labels)

    videos = [make_video(f"v{i}", n_frames=8 + i, seed=i) for i in range(3)]
    corpus = Corpus(videos, {"v0": "train", "v1": "val", "v2": "test"})
    save_corpus(corpus, tmp_path / "corpus")
    corpus_back = load_corpus(tmp_path / "corpus")
    for v in videos:
        assert corpus_back.video(v.id).features.tobytes() == v.features.tobytes()
    assert corpus_back.split == corpus.split

    ckpt_rng = np.random.default_rng(4)
    from segrsd.segtrain import SegCheckpoint

    ckpt = SegCheckpoint(
        iteration=2,
        appearance=init_appearance(ckpt_rng, 4, [6], 3, 0.85),
        mallows=MallowsModel(3, np.array([1.5, 0.7]), nu0=0.1, r0=1.0),
        lengths=LengthModel(3, np.array([0.5, 0.3, 0.2]), alpha0=1.0),
        labels={"v0": np.array([0, 0, 1, 2]), "v1": np.array([1, 1, 2])},
        tc_score=0.75,
    )
    seg_path = tmp_path / "seg.ckpt"
    save_seg_checkpoint(ckpt, seg_path)
    first = seg_path.read_bytes()
    save_seg_checkpoint(ckpt, seg_path)
    assert seg_path.read_bytes() == first
    seg_back = load_seg_checkpoint(seg_path)
    for got, want in zip(seg_back.appearance.layers, ckpt.appearance.layers):
        assert got.weights.tobytes() == want.weights.tobytes()
        assert got.bias.tobytes() == want.bias.tobytes()
    assert seg_back.mallows.rho.tobytes() == ckpt.mallows.rho.tobytes()
    assert seg_back.lengths.theta.tobytes() == ckpt.lengths.theta.tobytes()
    for vid in ckpt.labels:
        assert np.array_equal(seg_back.labels[vid], ckpt.labels[vid])

    from segrsd.data_io import save_rsd_checkpoint

    rsd = init_rsd(np.random.default_rng(5), 4, hidden_dim=6, head_dim=4)
    rsd_path = tmp_path / "rsd.ckpt"
    save_rsd_checkpoint(rsd, rsd_path)
    rsd_back, _ = load_rsd_checkpoint(rsd_path)
    for got, want in zip(rsd_back.layer_list(), rsd.layer_list()):
        assert got.weights.tobytes() == want.weights.tobytes()
        assert got.bias.tobytes() == want.bias.tobytes()

    raw = bytearray(seg_path.read_bytes())
    bad_magic = tmp_path / "bad_magic.ckpt"
    bad_magic.write_bytes(b"WRONGMAG" + bytes(raw[8:]))
    with pytest.raises(BadMagicError):
        load_seg_checkpoint(bad_magic)

    truncated = tmp_path / "truncated.ckpt"
    truncated.write_bytes(bytes(raw[: len(raw) // 2]))
    with pytest.raises(TruncatedFileError):
        load_seg_checkpoint(truncated)

    tampered = bytearray(raw)
    tampered[8] = 99
    versioned = tmp_path / "versioned.ckpt"
    versioned.write_bytes(bytes(tampered))
    with pytest.raises(VersionError):
        load_seg_checkpoint(versioned)

    with pytest.raises(DataFormatError):
        load_rsd_checkpoint(seg_path)
    with pytest.raises(ShapeMismatchError):
        load_seg_checkpoint(seg_path, expect_feature_dim=11)
    with pytest.raises(MissingFileError):
        load_seg_checkpoint(tmp_path / "absent.ckpt")
    _summary("serialization: round trips bit-exact, corruption rejected")
