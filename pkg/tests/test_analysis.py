import itertools
import math

import numpy as np
import pytest

from prealign import CheckpointMismatchError, DegenerateInputError, PrealignError
from prealign.analysis import (
    adaptation_report,
    cka,
    count_flops,
    cross_layer_similarity,
    InsufficientSamplesError,
    intrusion_breakdown,
    intrusion_dimension,
    measure_throughput,
    MissingModalityError,
    modality_gap,
    pearson,
    per_layer_gap,
    svd,
    update_density,
)
from prealign.model import collect_hidden_states, generate_greedy, LayerActivations
from prealign.tensor import DimensionError, OpCounter, Rng

from .conftest import tiny_model, tiny_sample, tiny_spec


def test_gap_closed_form():
    x = Rng(0, "gap").normal((6, 4))
    assert modality_gap(x, x) == 0

    # Shifting one modality only moves the centers
    shift = np.array([1.0, 2.0, 0.0, -2.0])
    assert modality_gap(x + shift, x) == pytest.approx(9 / 4)

    with pytest.raises(InsufficientSamplesError):
        modality_gap(x[:1], x)

    with pytest.raises(DimensionError):
        modality_gap(x, x[:, :3])


def test_gap_gaussians():
    # Means 1 apart and std 1 vs 2 in every dimension: (d * 1 + d * 1) / d
    n, d = 20000, 4
    visual = 1.0 + Rng(1, "visual").normal((n, d))
    text = Rng(1, "text").normal((n, d), std=2.0)
    assert modality_gap(visual, text) == pytest.approx(2.0, abs=0.1)


def test_gap_profile():
    samples = [tiny_sample("vqa_color", i) for i in range(3)]
    acts = collect_hidden_states(tiny_model("dpa"), samples)
    profile = per_layer_gap(acts["target_lm"])
    assert len(profile.per_layer_gap) == 3
    assert profile.sample_counts[0] == 12
    assert all(g >= 0 for g in profile.per_layer_gap)
    assert profile.mean == pytest.approx(sum(profile.per_layer_gap) / 3)
    assert str(profile).startswith("target_lm gap profile: ")

    text_only = LayerActivations([np.zeros((3, 2))], ["text"] * 3, "target_lm")
    with pytest.raises(MissingModalityError):
        per_layer_gap(text_only)


def test_cka():
    x = Rng(0, "cka", "x").normal((20, 5))
    y = Rng(0, "cka", "y").normal((20, 3))
    q, _ = np.linalg.qr(Rng(0, "cka", "q").normal((5, 5)))
    assert cka(x, x) == pytest.approx(1.0)
    assert cka(x, x @ q) == pytest.approx(1.0)  # Invariant to rotations
    assert cka(x, 3 * x + 7) == pytest.approx(1.0)  # ... to isotropic scaling and offsets
    assert cka(x, y) == pytest.approx(cka(y, x))
    assert 0 <= cka(x, y) < 1

    with pytest.raises(DegenerateInputError):
        cka(x, np.ones((20, 2)))

    with pytest.raises(DimensionError):
        cka(x, y[:10])

    with pytest.raises(InsufficientSamplesError):
        cka(x[:1], y[:1])


def test_similarity():
    samples = [tiny_sample("vqa_color", i) for i in range(3)]
    acts = collect_hidden_states(tiny_model("dpa"), samples)
    for component in ("perceiver_lm", "target_lm"):
        sim = cross_layer_similarity(acts[component], "visual")
        n = acts[component].layer_count
        assert sim.m.shape == (n, n)
        assert np.allclose(sim.m, sim.m.T)
        assert np.allclose(np.diag(sim.m), 1.0)
        assert np.all((sim.m >= 0) & (sim.m <= 1))
        assert sim.distance(sim) == 0

    single = LayerActivations([np.zeros((3, 2))], ["visual"] * 3, "target_lm")
    with pytest.raises(DegenerateInputError):
        cross_layer_similarity(single, "visual")


@pytest.mark.parametrize("shape", [(7, 5), (5, 7), (16, 16), (64, 64)])
def test_svd(shape):
    w = Rng(0, "svd", *shape).normal(shape)
    u, s, v = svd(w)
    k = min(shape)
    assert u.shape == (shape[0], k)
    assert v.shape == (shape[1], k)
    assert np.allclose(u @ np.diag(s) @ v.T, w, atol=1e-9)
    assert np.allclose(u.T @ u, np.eye(k), atol=1e-9)
    assert np.allclose(v.T @ v, np.eye(k), atol=1e-9)
    assert np.all(np.diff(s) <= 0)
    assert np.allclose(s, np.linalg.svd(w, compute_uv=False), atol=1e-9)


def test_svd_rank_deficient():
    a = Rng(0, "low", "a").normal((6, 2))
    b = Rng(0, "low", "b").normal((2, 5))
    u, s, v = svd(a @ b)
    assert np.count_nonzero(s) == 2
    assert np.allclose(u.T @ u, np.eye(5), atol=1e-9)  # Null directions are completed into an orthonormal basis
    assert np.allclose(u @ np.diag(s) @ v.T, a @ b, atol=1e-9)

    u, s, v = svd(np.zeros((3, 3)))
    assert not s.any()

    with pytest.raises(DimensionError):
        svd(np.zeros(3))


def test_intrusion():
    # Rotating the top-2 left singular directions by 45 degrees yields exactly 2 intruders
    w0 = np.diag([3.0, 2.0, 1.0])
    c = math.cos(math.pi / 4)
    rotation = np.array([[c, -c, 0.0], [c, c, 0.0], [0.0, 0.0, 1.0]])
    before = {"target_lm.w": w0, "target_lm.b": np.zeros(3), "vit.w": w0}
    after = {"target_lm.w": rotation @ w0, "target_lm.b": np.zeros(3), "vit.w": w0}
    assert intrusion_dimension(before, after) == 2
    assert intrusion_dimension(before, after, mode="right") == 0
    assert intrusion_dimension(before, before) == 0
    assert intrusion_breakdown(before, after) == [dict(name="target_lm.w", examined=3, intrusion=2)]

    # A looser threshold tolerates 45 degrees
    assert intrusion_dimension(before, after, tau_cos=0.7) == 0

    report = adaptation_report(before, after)
    assert report.intrusion_dimension == 2
    assert report.update_density == pytest.approx(4 / 12)  # 4 of 9 matrix entries change, none of the 3 biases
    assert str(report) == "density 0.3333, intrusion 2"


def test_update_density():
    w0 = {"target_lm.a": np.zeros(10), "target_lm.b": np.zeros((2, 5))}
    w1 = {"target_lm.a": np.zeros(10), "target_lm.b": np.zeros((2, 5))}
    w1["target_lm.a"][:3] = 1.0
    w1["target_lm.b"][0, 0] = 1e-7  # Below threshold
    assert update_density(w0, w0) == 0
    assert update_density(w0, w1) == pytest.approx(3 / 20)
    assert update_density(w0, w1, tau=1e-8) == pytest.approx(4 / 20)

    with pytest.raises(PrealignError):
        update_density(w0, w1, tau=0)

    with pytest.raises(DegenerateInputError):
        update_density(w0, w1, scope="perceiver_lm.")

    with pytest.raises(CheckpointMismatchError):
        update_density(w0, {"target_lm.a": np.zeros(10)})

    with pytest.raises(CheckpointMismatchError):
        update_density(w0, dict(w1, **{"target_lm.a": np.zeros(11)}))


def test_pearson():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)

    with pytest.raises(DegenerateInputError):
        pearson([1], [2])

    with pytest.raises(DegenerateInputError):
        pearson([1, 2, 3], [5, 5, 5])

    with pytest.raises(DimensionError):
        pearson([1, 2], [1, 2, 3])


@pytest.mark.parametrize("variant", ["baseline_vit", "baseline_large_mlp", "dpa", "dpa_no_lm_blocks", "dpa_instruction_context"])
def test_flops_match_op_counts(variant):
    model = tiny_model(variant)
    sample = tiny_sample()
    with OpCounter() as counter:
        generate_greedy(model, sample, 3, stop_at_eos=False)

    report = count_flops(model.spec, prompt_len=len(sample.prompt), gen_len=3)
    assert counter.total == report.total
    assert counter.by_scope["target_lm"] == report.components["target_lm"] + report.decode_total
    for component in ("vit", "proj_p", "perceiver_lm", "proj"):
        assert counter.by_scope.get(component, 0) == report.components.get(component, 0)


def test_flops_ratios():
    report = count_flops(tiny_spec("dpa"))
    assert report.ratios["decode_per_token"] == 1
    assert report.ratios["prefill"] > 1
    assert report.ratios["params"] > 1
    assert count_flops(tiny_spec("baseline_vit")).ratios == dict(params=1, prefill=1, decode_per_token=1, training=1)

    # Perceiver overhead shrinks as the target LM grows
    ratios = []
    for d_t in (8, 32, 128):
        spec = tiny_spec("dpa", target_lm=dict(d_t=d_t, layers=2, heads=2))
        ratios.append(count_flops(spec).ratios["training"])

    assert ratios[0] > ratios[1] > ratios[2] > 1
    assert str(report).startswith("dpa: prefill ")

    with pytest.raises(PrealignError):
        count_flops(tiny_spec(), prompt_len=0)


def test_throughput():
    model = tiny_model("baseline_vit")
    ticks = itertools.count()
    report = measure_throughput(model, [tiny_sample(), tiny_sample("vqa_shape", 1)], 2, repeats=3, clock=lambda: next(ticks))
    assert report.generated_tokens == 4
    assert report.rates == [4.0, 4.0, 4.0]
    assert report.tokens_per_second == 4.0
    assert str(report) == "4.0 tokens/s (median of 3)"
    assert sorted(report.environment) == ["cpus", "machine", "numpy", "python"]

    with pytest.raises(PrealignError):
        measure_throughput(model, [], 2)
