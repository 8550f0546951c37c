"""
Stage-0 text pre-training, standalone perceiver training, and the two-stage (projector alignment, then end-to-end)
recipe, with AdamW, schedules, freezing rules and checkpoint files.
"""

import json
import logging
import math
import os
import struct

import numpy as np
import runez

from prealign import canonical_json, fnv1a_64, hex_hash, PrealignError
from prealign.corpus import EVAL_GROUPS, VOCAB
from prealign.model import (
    adopt,
    build_pipeline,
    forward_lm,
    generate_greedy,
    param_group,
    PERCEIVER_PREFIXES,
    perceiver_visual,
    PipelineSpec,
    sample_visual,
)
from prealign.tensor import add, cross_entropy, Rng, scale, take, Tape


LOG = logging.getLogger(__name__)
CKPT_MAGIC = b"DPACKPT1"
CKPT_VERSION = 1
ADAM_EPS = 1e-8
LM_PREFIXES = {"target_lm": ("embed.", "target_lm.", "head."), "perceiver_lm": ("perceiver_lm.",)}


class NonFiniteGradientError(PrealignError):
    """Raised when a gradient contains NaN or Inf"""


class CheckpointFormatError(PrealignError):
    """Raised when a checkpoint file can't be decoded"""


class TrainConfig:
    """Optimizer and schedule settings for one stage"""

    def __init__(
        self,
        stage="stage2",
        max_lr=None,
        schedule="cosine",
        warmup_steps=0,
        epochs=1,
        batch_size=8,
        weight_decay=0.01,
        betas=(0.9, 0.999),
        grad_clip_norm=1.0,
        multitask_lambda=None,
        seed=0,
        snapshot_every=0,
        loss_on="answer",
        train_perceiver_projector="auto",
        budget=0,
    ):
        self.stage = stage
        self.max_lr = dict(projector=1e-3, rest=1e-3, vit=None)
        self.max_lr.update(max_lr or {})
        self.schedule = schedule
        self.warmup_steps = warmup_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.grad_clip_norm = grad_clip_norm
        self.multitask_lambda = multitask_lambda
        self.seed = seed
        self.snapshot_every = snapshot_every
        self.loss_on = loss_on
        self.train_perceiver_projector = train_perceiver_projector
        self.budget = budget
        if epochs <= 0 or batch_size <= 0 or warmup_steps < 0 or snapshot_every < 0:
            raise PrealignError(f"{stage}: epochs and batch_size must be positive, warmup_steps and snapshot_every non-negative")

        if (multitask_lambda or 0) < 0 or any(v is not None and v < 0 for v in self.max_lr.values()):
            raise PrealignError(f"{stage}: learning rates and multitask_lambda must be >= 0")

    def __repr__(self):
        return f"{self.stage} ({self.schedule}, lr={self.max_lr['rest']}, {self.epochs} epoch(s) x batch {self.batch_size})"

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def group_lr(self, group):
        """float: Max learning rate for param 'group' (ViT defaults to a fifth of the rest)"""
        value = self.max_lr.get(group)
        if value is None:
            value = 0.2 * self.max_lr["rest"]

        return value


def lr_factor(step, total_steps, schedule, warmup_steps):
    """float: Fraction of max learning rate to use at 'step'"""
    warmup = min(warmup_steps, total_steps)
    if step < warmup:
        return step / warmup

    if schedule == "warmup_stable_decay":
        decay_start = max(warmup, 0.9 * total_steps)
        if step <= decay_start or decay_start >= total_steps:
            return 1.0

        return max(0.0, (total_steps - step) / (total_steps - decay_start))

    if total_steps <= warmup:
        return 1.0

    progress = min(1.0, (step - warmup) / (total_steps - warmup))
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_schedule(step, total_steps, cfg, group="rest"):
    """
    Args:
        step (int): Current step, in [0, total_steps]
        total_steps (int): Total number of steps of the stage
        cfg (TrainConfig): Stage settings
        group (str): Param group (projector, vit or rest)

    Returns:
        (float): Learning rate to use
    """
    return cfg.group_lr(group) * lr_factor(step, total_steps, cfg.schedule, cfg.warmup_steps)


class OptimizerState:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0
        self.last_norm = 0.0

    def __repr__(self):
        return f"adamw state at step {self.step}"


def step_adamw(params, grads, state, lr, cfg):
    """
    One AdamW step over trainable parameters: global-norm clipping, bias-corrected moments, decoupled weight decay.

    Args:
        params (prealign.tensor.ParamStore): Parameters, updated in place
        grads (dict): Name -> gradient Tensor (missing names count as zero gradient)
        state (OptimizerState): Moments, updated in place
        lr (float | dict): Learning rate, or learning rate per param group
        cfg (TrainConfig): Betas, weight decay, clip norm

    Returns:
        (OptimizerState): 'state', with 'last_norm' set to pre-clip gradient norm
    """
    names = params.trainable_names()
    values = {}
    for name in names:
        g = grads.get(name)
        g = np.zeros_like(params[name].data) if g is None else np.asarray(getattr(g, "data", g), dtype=np.float64)
        if g.shape != params[name].data.shape:
            raise PrealignError(f"Gradient of '{name}' has shape {list(g.shape)}, expecting {params[name].shape}")

        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"Non-finite gradient for parameter '{name}'")

        values[name] = g

    norm = math.sqrt(sum(float((g * g).sum()) for g in values.values()))
    state.last_norm = norm
    if cfg.grad_clip_norm and norm > cfg.grad_clip_norm:
        factor = cfg.grad_clip_norm / norm
        values = {k: g * factor for k, g in values.items()}

    state.step += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in names:
        g = values[name]
        m = state.m[name] = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        rate = lr[param_group(name)] if isinstance(lr, dict) else lr
        theta = params[name].data
        params[name].data = theta - rate * ((m / c1) / (np.sqrt(v / c2) + ADAM_EPS) + cfg.weight_decay * theta)

    return state


class Checkpoint:
    """Named parameter values, the spec they belong to, and provenance metadata"""

    def __init__(self, params, spec, meta=None):
        """
        Args:
            params (dict): Name -> np.ndarray
            spec (PipelineSpec): Spec of the model the params come from
            meta (dict | None): stage, step, seed, config_hash, corpus_hash, ...
        """
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in sorted(params)}
        self.spec = spec
        self.meta = dict(meta or {})

    def __repr__(self):
        return f"checkpoint {self.meta.get('stage', '?')} of {self.spec.variant} ({runez.plural(self.params, 'param')})"

    def __eq__(self, other):
        return isinstance(other, Checkpoint) and self.to_bytes() == other.to_bytes()

    @classmethod
    def from_model(cls, model, prefixes=None, **meta):
        names = [n for n in model.params.names() if prefixes is None or n.startswith(tuple(prefixes))]
        return cls({n: model[n].data.copy() for n in names}, model.spec, meta)

    def to_model(self, seed=0):
        """Model: Freshly built model for this checkpoint's spec, with all checkpointed values loaded"""
        model = build_pipeline(self.spec, seed)
        adopt(model, self.params, tuple(n.split(".")[0] + "." for n in self.params))
        return model

    def _params_section(self):
        out = [struct.pack("<I", len(self.params))]
        for name, value in self.params.items():
            encoded = name.encode("utf-8")
            out.append(struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", value.ndim))
            out.append(struct.pack(f"<{value.ndim}I", *value.shape))
            out.append(np.ascontiguousarray(value, dtype="<f8").tobytes())

        return b"".join(out)

    @runez.cached_property
    def hash(self):
        """str: FNV-1a of the params section"""
        return hex_hash(fnv1a_64(self._params_section()))

    def to_bytes(self):
        spec = canonical_json(self.spec.to_dict()).encode("utf-8")
        meta = canonical_json(self.meta).encode("utf-8")
        header = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION)
        return header + struct.pack("<I", len(spec)) + spec + struct.pack("<I", len(meta)) + meta + self._params_section()

    @classmethod
    def from_bytes(cls, data):
        offset = 0

        def take(n):
            nonlocal offset
            if offset + n > len(data):
                raise CheckpointFormatError(f"Truncated checkpoint at byte offset {offset}")

            chunk = data[offset:offset + n]
            offset += n
            return chunk

        def unpack(fmt):
            return struct.unpack(fmt, take(struct.calcsize(fmt)))

        if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointFormatError("Not a checkpoint file, bad magic")

        (version,) = unpack("<I")
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"Unsupported checkpoint version {version}")

        try:
            spec = PipelineSpec.from_dict(json.loads(take(unpack("<I")[0]).decode("utf-8")))
            meta = json.loads(take(unpack("<I")[0]).decode("utf-8"))

        except (TypeError, ValueError) as e:
            raise CheckpointFormatError(f"Invalid checkpoint header: {e}")

        params = {}
        (count,) = unpack("<I")
        for _ in range(count):
            name = take(unpack("<H")[0]).decode("utf-8")
            (ndim,) = unpack("<B")
            dims = unpack(f"<{ndim}I")
            size = int(np.prod(dims)) if dims else 1
            params[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)

        if offset != len(data):
            raise CheckpointFormatError(f"Trailing bytes at offset {offset}")

        return cls(params, spec, meta)

    def save(self, path):
        runez.ensure_folder(os.path.dirname(os.path.abspath(path)), logger=False)
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

        LOG.info("Saved %s to %s", self, runez.short(path))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class ScoreReport:
    """Exact-match accuracy per task group, and drop in text accuracy since stage-0"""

    def __init__(self, accuracies, counts, forgetting_delta=None):
        self.accuracies = accuracies  # type: dict[str, float]
        self.counts = counts  # type: dict[str, int]
        self.forgetting_delta = forgetting_delta  # type: float | None

    def __repr__(self):
        return ", ".join(f"{k}={v:.3f}" for k, v in sorted(self.accuracies.items()))

    def to_dict(self):
        result = {f"acc_{k}": v for k, v in self.accuracies.items()}
        if self.forgetting_delta is not None:
            result["forgetting_delta"] = self.forgetting_delta

        return result


class TrainResult:
    def __init__(self, losses, steps):
        self.losses = losses
        self.steps = steps

    def __repr__(self):
        return f"{self.steps} steps, loss {self.initial_loss:.4f} -> {self.final_loss:.4f}"

    @property
    def initial_loss(self):
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else float("nan")


def sample_loss(model, sample, cfg, component="target_lm", stage=None):
    """Tensor: LM loss of 'sample' (answer positions only, unless cfg.loss_on == 'sequence'), plus auxiliary perceiver loss"""
    tokens = sample.tokens
    n = len(tokens)
    mask = [cfg.loss_on == "sequence" or i >= len(sample.prompt) for i in range(n - 1)]
    logits, _ = forward_lm(model, sample_visual(model, sample, component), tokens, component=component)
    loss = cross_entropy(take(logits, 0, n - 1), tokens[1:], mask)
    lam = cfg.multitask_lambda if cfg.multitask_lambda is not None else model.spec.multitask_lambda
    if component == "target_lm" and sample.image is not None and lam > 0 and model.spec.multitask_active(stage):
        aux_logits, _ = forward_lm(model, perceiver_visual(model, sample.image), tokens, component="perceiver_lm")
        loss = add(loss, scale(cross_entropy(take(aux_logits, 0, n - 1), tokens[1:], mask), lam))

    return loss


def fit(model, samples, cfg, trainable, component="target_lm", stage=None, on_snapshot=None):
    """
    Train 'trainable' parameters of 'model' on 'samples'.

    Args:
        model (Model): Model to train, updated in place
        samples (list): Training samples
        cfg (TrainConfig): Stage settings
        trainable (tuple): Name prefixes of parameters to update
        component (str): Language model the loss is computed with
        stage (str | None): Stage name, defaults to cfg.stage
        on_snapshot (callable | None): Called with step number every cfg.snapshot_every steps (and at step 0)

    Returns:
        (TrainResult): Per-step losses
    """
    stage = stage or cfg.stage
    params = model.params
    for name in params.names():
        params.trainable_mask[name] = name.startswith(tuple(trainable))
        params[name].requires_grad = params.trainable_mask[name]

    n = len(samples)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    LOG.info("Training %s on %s (%s steps, %s trainable scalars)", stage, runez.plural(samples, "sample"), total, _trainable_tally(params))
    state = OptimizerState()
    losses = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = Rng(cfg.seed, "shuffle", stage, epoch).permutation(n)
            for start in range(0, n, cfg.batch_size):
                if on_snapshot and cfg.snapshot_every and step % cfg.snapshot_every == 0:
                    on_snapshot(step)

                batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                lr = {g: lr_schedule(step, total, cfg, g) for g in ("projector", "rest", "vit")}
                with Tape() as tape:
                    loss = None
                    for sample in batch:
                        item = sample_loss(model, sample, cfg, component=component, stage=stage)
                        loss = item if loss is None else add(loss, item)

                    loss = scale(loss, 1.0 / len(batch))
                    grads = tape.backward(loss)

                step_adamw(params, grads, state, lr, cfg)
                losses.append(loss.item())
                step += 1
                LOG.debug("%s step %s/%s: loss %.5f, grad norm %.4f", stage, step, total, losses[-1], state.last_norm)

        if on_snapshot and cfg.snapshot_every and step % cfg.snapshot_every == 0:
            on_snapshot(step)

    finally:
        for name in params.names():
            params[name].requires_grad = True

    return TrainResult(losses, step)


def _trainable_tally(params):
    return sum(params[n].size for n in params.trainable_names())


def stage1_trainable(spec, cfg):
    """tuple: Prefixes trained during projector alignment"""
    prefixes = ["proj."]
    wanted = cfg.train_perceiver_projector
    if spec.is_dpa and wanted != "never":
        if wanted == "always" or spec.effective_perceiver_init == "untrained" or spec.multitask_active("stage1"):
            prefixes.append("proj_p.")

    return tuple(prefixes)


def stage2_trainable(spec):
    """tuple: Prefixes trained end-to-end (perceiver excluded for the frozen-perceiver variant)"""
    prefixes = ("vit.", "proj_p.", "perceiver_lm.", "proj.", "target_lm.", "embed.", "head.")
    if spec.variant == "dpa_frozen_perceiver":
        prefixes = tuple(p for p in prefixes if p not in PERCEIVER_PREFIXES)

    return prefixes


def pretrain_text(spec, component, samples, cfg, **meta):
    """
    Args:
        spec (PipelineSpec): Dimensions to use
        component (str): 'perceiver_lm' or 'target_lm'
        samples (list): Text-only samples
        cfg (TrainConfig): Stage settings
        **meta: Additional checkpoint metadata

    Returns:
        (Checkpoint): Trained weights of the language model 'component'
    """
    if component not in LM_PREFIXES:
        raise PrealignError(f"Can't pre-train '{component}', expecting one of {', '.join(LM_PREFIXES)}")

    if component == "perceiver_lm" and not spec.has_perceiver_lm:
        spec = spec.with_variant("dpa")

    model = build_pipeline(spec, cfg.seed)
    result = fit(model, samples, cfg, LM_PREFIXES[component], component=component, stage="stage0")
    LOG.info("Pre-trained %s: %s", component, result)
    return Checkpoint.from_model(model, LM_PREFIXES[component], stage="stage0", component=component, step=result.steps, seed=cfg.seed, **meta)


def train_perceiver(model, captions, instructions, caption_cfg, instruct_cfg, budget, **meta):
    """
    Train the perceiver pipeline as a standalone VLM: projector alignment on captions, then end-to-end on 'budget' instruction samples.

    Returns:
        (Checkpoint): Trained vit., proj_p. and perceiver_lm. weights
    """
    fit(model, captions, caption_cfg, ("proj_p.",), component="perceiver_lm", stage="perceiver-stage1")
    steps = 0
    if budget:
        result = fit(model, instructions[:budget], instruct_cfg, PERCEIVER_PREFIXES, component="perceiver_lm", stage="perceiver-stage2")
        steps = result.steps

    return Checkpoint.from_model(model, PERCEIVER_PREFIXES, stage="perceiver", budget=budget, step=steps, seed=instruct_cfg.seed, **meta)


def train_stage1(model, samples, cfg, **meta):
    """Checkpoint: Full model after projector alignment on captions"""
    result = fit(model, samples, cfg, stage1_trainable(model.spec, cfg), stage="stage1")
    LOG.info("Stage-1 done: %s", result)
    meta.update(initial_loss=result.initial_loss, final_loss=result.final_loss)
    return Checkpoint.from_model(model, stage="stage1", step=result.steps, seed=cfg.seed, **meta)


def train_stage2(model, samples, cfg, on_snapshot=None, **meta):
    """
    Args:
        model (Model): Model after stage-1
        samples (list): Instruction + text retention samples
        cfg (TrainConfig): Stage settings
        on_snapshot (callable | None): Called with a Checkpoint every cfg.snapshot_every steps (step 0 included)
        **meta: Additional checkpoint metadata

    Returns:
        (Checkpoint): Full model after end-to-end training
    """

    def snapshot(step):
        if on_snapshot:
            on_snapshot(Checkpoint.from_model(model, stage="stage2", step=step, seed=cfg.seed, **meta))

    result = fit(model, samples, cfg, stage2_trainable(model.spec), stage="stage2", on_snapshot=snapshot)
    LOG.info("Stage-2 done: %s", result)
    meta.update(initial_loss=result.initial_loss, final_loss=result.final_loss)
    return Checkpoint.from_model(model, stage="stage2", step=result.steps, seed=cfg.seed, **meta)


def until_eos(tokens, eos):
    tokens = list(tokens)
    return tokens[:tokens.index(eos)] if eos in tokens else tokens


def evaluate(model, splits, predictor=None, stage0_text_accuracy=None, component="target_lm"):
    """
    Args:
        model (Model | None): Model to evaluate (not needed when 'predictor' is given)
        splits (dict): Eval split name -> samples
        predictor (callable | None): Sample -> predicted tokens (greedy decoding by default)
        stage0_text_accuracy (float | None): Text accuracy recorded after stage-0
        component (str): Language model to decode with

    Returns:
        (ScoreReport): Exact-match accuracy per group
    """
    if predictor is None:

        def predictor(sample):
            return generate_greedy(model, sample, max_new=len(sample.answer), component=component)

    accuracies = {}
    counts = {}
    for split, group in EVAL_GROUPS.items():
        samples = splits.get(split)
        if not samples:
            continue

        hits = sum(until_eos(predictor(s), VOCAB.eos) == until_eos(s.answer, VOCAB.eos) for s in samples)
        accuracies[group] = hits / len(samples)
        counts[group] = len(samples)

    delta = None
    if stage0_text_accuracy is not None and "text" in accuracies:
        delta = stage0_text_accuracy - accuracies["text"]

    return ScoreReport(accuracies, counts, forgetting_delta=delta)


