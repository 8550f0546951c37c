"""
Representation and efficiency measurements: modality gap, cross-layer similarity, weight adaptation, FLOPs and throughput.

The modality gap is a dimension-normalized 2-Wasserstein distance between diagonal gaussians fitted to each modality
(center distance plus shape difference), kept behind `modality_gap()` so another gap metric can be swapped in.
"""

import logging
import math
import os
import platform
import statistics
import time

import numpy as np
import runez

from prealign import CheckpointMismatchError, DegenerateInputError, PrealignError
from prealign.model import count_params, generate_greedy
from prealign.tensor import DimensionError


LOG = logging.getLogger(__name__)
MAX_SWEEPS = 60
JACOBI_TOLERANCE = 1e-13


class InsufficientSamplesError(PrealignError):
    """Raised when a statistic needs more rows than provided"""


class MissingModalityError(PrealignError):
    """Raised when activations lack one of the two modalities"""


class SvdConvergenceError(PrealignError):
    """Raised when Jacobi sweeps don't converge"""


def _matrix(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def modality_gap(visual, text):
    """
    Args:
        visual: [n_v, d] visual-token states
        text: [n_t, d] text-token states

    Returns:
        (float): (|mu_v - mu_t|^2 + sum_i (sigma_v,i - sigma_t,i)^2) / d
    """
    v, t = _matrix(visual), _matrix(text)
    if v.ndim != 2 or t.ndim != 2 or v.shape[1] != t.shape[1]:
        raise DimensionError(f"modality_gap: incompatible shapes {list(v.shape)} and {list(t.shape)}")

    if v.shape[0] < 2 or t.shape[0] < 2:
        raise InsufficientSamplesError(f"modality_gap needs at least 2 rows per modality, got {v.shape[0]} and {t.shape[0]}")

    center = v.mean(axis=0) - t.mean(axis=0)
    shape = v.std(axis=0) - t.std(axis=0)
    return float((center @ center + shape @ shape) / v.shape[1])


class GapProfile:
    def __init__(self, component, per_layer_gap, sample_counts):
        self.component = component
        self.per_layer_gap = per_layer_gap  # type: list[float]
        self.sample_counts = sample_counts  # type: tuple[int, int]

    def __repr__(self):
        return f"{self.component} gap profile: {', '.join('%.4f' % g for g in self.per_layer_gap)}"

    @property
    def mean(self):
        return sum(self.per_layer_gap) / len(self.per_layer_gap)


def per_layer_gap(acts):
    """
    Args:
        acts (prealign.model.LayerActivations): States of one stack

    Returns:
        (GapProfile): Gap at each layer (layer 0 is the stack input)
    """
    counts = (acts.modality_tags.count("visual"), acts.modality_tags.count("text"))
    if not all(counts):
        raise MissingModalityError(f"{acts.component} activations have {counts[0]} visual and {counts[1]} text tokens")

    gaps = [modality_gap(acts.rows(i, "visual"), acts.rows(i, "text")) for i in range(acts.layer_count)]
    return GapProfile(acts.component, gaps, counts)


def cka(x, y):
    """
    Args:
        x: [n, d1]
        y: [n, d2]

    Returns:
        (float): Linear CKA of column-centered x and y, in [0, 1]
    """
    x, y = _matrix(x), _matrix(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError(f"cka: row counts differ, {list(x.shape)} vs {list(y.shape)}")

    if x.shape[0] < 2:
        raise InsufficientSamplesError("cka needs at least 2 rows")

    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0 or yy == 0:
        raise DegenerateInputError("cka: zero-variance input")

    xy = np.linalg.norm(x.T @ y)
    return float(min(1.0, max(0.0, xy * xy / (xx * yy))))


class SimilarityMatrix:
    def __init__(self, modality, m):
        self.modality = modality
        self.m = m  # type: np.ndarray

    def __repr__(self):
        return f"{self.modality} similarity {list(self.m.shape)}"

    def distance(self, other):
        """float: Frobenius distance to 'other'"""
        return float(np.linalg.norm(self.m - other.m))


def cross_layer_similarity(acts, modality):
    """SimilarityMatrix: CKA between every pair of layers, over rows tagged 'modality'"""
    if acts.layer_count < 2:
        raise DegenerateInputError("cross_layer_similarity needs at least 2 layers")

    rows = [acts.rows(i, modality) for i in range(acts.layer_count)]
    n = len(rows)
    m = np.ones((n, n))
    for i in range(n):
        for j in range(i, n):
            m[i, j] = m[j, i] = cka(rows[i], rows[j])

    return SimilarityMatrix(modality, m)


def _scoped(w0, w1, scope):
    p0 = getattr(w0, "params", w0)
    p1 = getattr(w1, "params", w1)
    names = sorted(n for n in p0 if n.startswith(scope))
    if names != sorted(n for n in p1 if n.startswith(scope)):
        raise CheckpointMismatchError(f"Checkpoints don't have the same '{scope}' parameters")

    for name in names:
        if np.shape(p0[name]) != np.shape(p1[name]):
            raise CheckpointMismatchError(f"Parameter '{name}' has shape {list(np.shape(p0[name]))} vs {list(np.shape(p1[name]))}")

    return [(n, _matrix(p0[n]), _matrix(p1[n])) for n in names]


def update_density(w0, w1, tau=1e-6, scope="target_lm."):
    """
    Args:
        w0 (prealign.trainer.Checkpoint | dict): Weights before
        w1 (prealign.trainer.Checkpoint | dict): Weights after
        tau (float): Change threshold
        scope (str): Parameter name prefix to look at

    Returns:
        (float): Fraction of scalars under 'scope' with |w1 - w0| > tau
    """
    if tau <= 0:
        raise PrealignError("update_density: tau must be positive")

    changed = total = 0
    for _, a, b in _scoped(w0, w1, scope):
        changed += int((np.abs(b - a) > tau).sum())
        total += a.size

    if not total:
        raise DegenerateInputError(f"No parameter under '{scope}'")

    return changed / total


def _complete(u):
    """Replace zero columns of 'u' with unit vectors orthogonal to all other columns"""
    m, k = u.shape
    filled = [j for j in range(k) if np.any(u[:, j])]
    candidates = iter(np.eye(m))
    for j in range(k):
        if j in filled:
            continue

        for e in candidates:
            basis = u[:, filled]
            v = e - basis @ (basis.T @ e)
            v = v - basis @ (basis.T @ v)
            norm = np.linalg.norm(v)
            if norm > 1e-6:
                u[:, j] = v / norm
                filled.append(j)
                break

    return u


def svd(w, name=None):
    """
    One-sided (Hestenes) Jacobi SVD.

    Args:
        w: [m, n] matrix
        name (str | None): Name used in error messages

    Returns:
        (np.ndarray, np.ndarray, np.ndarray): U [m, k], singular values [k] (descending), V [n, k], with k = min(m, n)
    """
    w = _matrix(w)
    if w.ndim != 2:
        raise DimensionError(f"svd: expecting a matrix, got shape {list(w.shape)}")

    m, n = w.shape
    if m < n:
        v, s, u = svd(w.T, name=name)
        return u, s, v

    a = w.copy()
    v = np.eye(n)
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = a[:, p] @ a[:, p]
                beta = a[:, q] @ a[:, q]
                gamma = a[:, p] @ a[:, q]
                if gamma == 0 or abs(gamma) <= JACOBI_TOLERANCE * math.sqrt(alpha * beta):
                    continue

                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                ap, aq = a[:, p].copy(), a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

        if not rotated:
            break

    else:
        raise SvdConvergenceError(f"SVD of {name or 'matrix'} did not converge after {MAX_SWEEPS} sweeps")

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    cutoff = sigma[0] * 1e-12 if sigma.size and sigma[0] > 0 else 0.0
    u = np.zeros_like(a)
    for j in range(n):
        if sigma[j] > cutoff:
            u[:, j] = a[:, j] / sigma[j]

        else:
            sigma[j] = 0.0

    return _complete(u), sigma, v


def intrusion_breakdown(w0, w1, tau_cos=0.9, scope="target_lm.", mode="left"):
    """
    Args:
        w0 (prealign.trainer.Checkpoint | dict): Weights before
        w1 (prealign.trainer.Checkpoint | dict): Weights after
        tau_cos (float): A singular vector of w1 with best absolute cosine (against w0's) below this is an intrusion
        scope (str): Parameter name prefix to look at (only 2-D parameters are examined)
        mode (str): 'left' or 'right' singular vectors

    Returns:
        (list[dict]): Per-matrix name, examined vector count and intrusion count
    """
    result = []
    for name, a, b in _scoped(w0, w1, scope):
        if a.ndim != 2:
            continue

        u0, _, v0 = svd(a, name=name)
        u1, _, v1 = svd(b, name=name)
        before, after = (u0, u1) if mode == "left" else (v0, v1)
        best = np.abs(after.T @ before).max(axis=1)
        result.append(dict(name=name, examined=int(after.shape[1]), intrusion=int((best < tau_cos).sum())))

    return result


def intrusion_dimension(w0, w1, tau_cos=0.9, scope="target_lm.", mode="left"):
    """int: Total number of intruder singular vectors, over all matrices under 'scope'"""
    return sum(item["intrusion"] for item in intrusion_breakdown(w0, w1, tau_cos=tau_cos, scope=scope, mode=mode))


class AdaptationReport:
    def __init__(self, update_density, intrusion_dimension, breakdown):
        self.update_density = update_density
        self.intrusion_dimension = intrusion_dimension
        self.breakdown = breakdown

    def __repr__(self):
        return f"density {self.update_density:.4f}, intrusion {self.intrusion_dimension}"


def adaptation_report(w0, w1, tau=1e-6, tau_cos=0.9, scope="target_lm.", mode="left"):
    breakdown = intrusion_breakdown(w0, w1, tau_cos=tau_cos, scope=scope, mode=mode)
    intrusion = sum(item["intrusion"] for item in breakdown)
    return AdaptationReport(update_density(w0, w1, tau=tau, scope=scope), intrusion, breakdown)


def pearson(xs, ys):
    """float: Sample Pearson correlation coefficient"""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"pearson: expecting two equal-length sequences, got {len(x)} and {len(y)}")

    if len(x) < 2:
        raise DegenerateInputError("pearson needs at least 2 points")

    dx = x - x.mean()
    dy = y - y.mean()
    sxx = dx @ dx
    syy = dy @ dy
    if sxx == 0 or syy == 0:
        raise DegenerateInputError("pearson: zero variance")

    return float(max(-1.0, min(1.0, (dx @ dy) / math.sqrt(sxx * syy))))


class FlopsReport:
    """Analytic FLOPs of one generation (prefill + decode) and of one training step"""

    def __init__(self, spec, components, decode_total, decode_per_token, training, params, ratios=None):
        self.spec = spec
        self.components = components  # type: dict[str, int]
        self.decode_total = decode_total
        self.decode_per_token = decode_per_token
        self.training = training
        self.params = params
        self.ratios = ratios or {}

    def __repr__(self):
        return f"{self.spec.variant}: prefill {self.prefill}, decode {self.decode_total}, training {self.training}"

    @property
    def prefill(self):
        return sum(self.components.values())

    @property
    def total(self):
        return self.prefill + self.decode_total


def _linear_flops(t, m, n):
    return 2 * t * m * n


def _stack_flops(t, d, layers, context=None):
    context = t if context is None else context
    return layers * (24 * t * d * d + 2 * t * context * d)


def _mlp_flops(t, d_in, hidden, d_out):
    return _linear_flops(t, d_in, hidden) + _linear_flops(t, hidden, d_out)


def _visual_flops(spec, p, instruction_len):
    result = {}
    dv = spec.d_vit
    result["vit"] = _linear_flops(p, spec.vit["patch_dim"], dv) + _stack_flops(p, dv, spec.vit["layers"])
    if spec.is_dpa:
        result["proj_p"] = _mlp_flops(p, dv, spec.d_p, spec.d_p)
        if spec.has_perceiver_lm:
            n = 1 + instruction_len + p
            result["perceiver_lm"] = _stack_flops(n, spec.d_p, spec.perceiver_lm["layers"])

    result["proj"] = _mlp_flops(p, spec.projector_input, spec.projector_hidden, spec.d_t)
    return result


def _count(spec, p, prompt_len, gen_len, train_tokens):
    dt, layers, vocab = spec.d_t, spec.target_lm["layers"], spec.vocab_size
    instruction_len = prompt_len if spec.variant == "dpa_instruction_context" else 0
    components = _visual_flops(spec, p, instruction_len)
    n = 1 + p + prompt_len
    components["target_lm"] = _stack_flops(n, dt, layers) + _linear_flops(1 + prompt_len, dt, vocab)
    steps = [_stack_flops(1, dt, layers, context=n + j + 1) + _linear_flops(1, dt, vocab) for j in range(gen_len - 1)]
    first_step = _stack_flops(1, dt, layers, context=n + 1) + _linear_flops(1, dt, vocab)
    visual = _visual_flops(spec, p, instruction_len)
    forward = sum(visual.values()) + _stack_flops(train_tokens + p, dt, layers) + _linear_flops(train_tokens, dt, vocab)
    return FlopsReport(spec, components, sum(steps), first_step, 3 * forward, count_params(spec)["total"])


def count_flops(spec, p=None, prompt_len=10, gen_len=8, train_tokens=40):
    """
    Args:
        spec (PipelineSpec): Pipeline to account for
        p (int | None): Number of visual tokens (defaults to spec's G^2)
        prompt_len (int): Prompt tokens (BOS excluded)
        gen_len (int): Generated tokens (first one comes out of prefill)
        train_tokens (int): Text tokens (BOS included) of one training sequence

    Returns:
        (FlopsReport): Counts, plus ratios against the same dims with a plain ViT baseline
    """
    if min(prompt_len, gen_len, train_tokens) < 1 or (p is not None and p < 1):
        raise PrealignError("count_flops: lengths must be positive")

    p = spec.patch_count if p is None else p
    report = _count(spec, p, prompt_len, gen_len, train_tokens)
    base = _count(spec.with_variant("baseline_vit"), p, prompt_len, gen_len, train_tokens)
    report.ratios = dict(
        params=report.params / base.params,
        prefill=report.prefill / base.prefill,
        decode_per_token=report.decode_per_token / base.decode_per_token,
        training=report.training / base.training,
    )
    return report


class ThroughputReport:
    def __init__(self, tokens_per_second, rates, generated_tokens, environment):
        self.tokens_per_second = tokens_per_second
        self.rates = rates
        self.generated_tokens = generated_tokens
        self.environment = environment

    def __repr__(self):
        return f"{self.tokens_per_second:.1f} tokens/s (median of {len(self.rates)})"


def environment_info():
    return dict(python=platform.python_version(), numpy=np.__version__, machine=platform.machine(), cpus=os.cpu_count())


def measure_throughput(model, samples, gen_len, repeats=3, clock=time.perf_counter):
    """
    Args:
        model (prealign.model.Model): Model to time
        samples (list): Batch to generate for
        gen_len (int): Tokens generated per sample (EOS does not stop generation)
        repeats (int): Timed repetitions, after one warmup pass
        clock (callable): Time source

    Returns:
        (ThroughputReport): Median generated tokens per second
    """
    if not samples or repeats < 1:
        raise PrealignError("measure_throughput needs samples and repeats >= 1")

    generate_greedy(model, samples[0], gen_len, stop_at_eos=False)
    generated = len(samples) * gen_len
    rates = []
    for _ in range(repeats):
        started = clock()
        for sample in samples:
            generate_greedy(model, sample, gen_len, stop_at_eos=False)

        elapsed = max(clock() - started, 1e-9)
        rates.append(generated / elapsed)

    LOG.debug("Throughput of %s: %s", model.spec.variant, runez.joined(["%.1f" % r for r in rates], delimiter=", "))
    return ThroughputReport(statistics.median(rates), rates, generated, environment_info())


