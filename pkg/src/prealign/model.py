"""
Baseline (ViT -> projector -> target LM) and pre-aligned (ViT -> perceiver projector -> perceiver LM -> projector -> target LM)
vision-language pipelines, built from the tensor ops in prealign.tensor.
"""

import logging
import math

import numpy as np
import runez

from prealign import canonical_json, CheckpointMismatchError, PrealignError, VARIANTS
from prealign.corpus import VOCAB
from prealign.tensor import (
    add,
    attention,
    concat,
    DimensionError,
    embedding,
    flops_scope,
    gelu,
    layer_norm,
    matmul,
    ParamStore,
    Rng,
    take,
    Tensor,
)


LOG = logging.getLogger(__name__)
INIT_STD = 0.02
COMPONENT_PREFIXES = ("vit.", "proj_p.", "perceiver_lm.", "proj.", "target_lm.", "embed.", "head.")
PERCEIVER_PREFIXES = ("vit.", "proj_p.", "perceiver_lm.")
BLOCK_PARAMS = (
    "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"
)
UNTRAINED_BY_DEFAULT = ("dpa_untrained_perceiver", "dpa_no_lm_pretraining")


class SpecValidationError(PrealignError):
    """Raised when a PipelineSpec violates a constraint"""


class VariantMismatchError(PrealignError):
    """Raised when an operation is not applicable to the model's variant"""


class UsageError(PrealignError):
    """Raised on invalid combination of arguments"""


class PipelineSpec:
    """Declarative description of one pipeline variant and its dimensions"""

    def __init__(
        self,
        variant="dpa",
        vit=None,
        perceiver_lm=None,
        target_lm=None,
        vocab_size=64,
        grid=4,
        max_len=0,
        mlp_hidden_multiplier=5.0,
        multitask_lambda=0.5,
        multitask_stages=("stage1",),
        perceiver_init="auto",
    ):
        self.variant = variant
        self.vit = dict(vit or dict(patch_dim=14, d_vit=32, layers=2, heads=4))
        self.perceiver_lm = dict(perceiver_lm or dict(d_p=48, layers=4, heads=4))
        self.target_lm = dict(target_lm or dict(d_t=64, layers=6, heads=4))
        self.vocab_size = vocab_size
        self.grid = grid
        self.max_len = max_len or 9 * grid * grid + 32
        self.mlp_hidden_multiplier = mlp_hidden_multiplier
        self.multitask_lambda = multitask_lambda
        self.multitask_stages = list(multitask_stages)
        self.perceiver_init = perceiver_init

    def __repr__(self):
        return f"{self.variant} (d_vit={self.d_vit}, d_p={self.d_p}, d_t={self.d_t}, G={self.grid})"

    def __eq__(self, other):
        return isinstance(other, PipelineSpec) and self.to_dict() == other.to_dict()

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def to_dict(self):
        return dict(
            variant=self.variant,
            vit=dict(self.vit),
            perceiver_lm=dict(self.perceiver_lm),
            target_lm=dict(self.target_lm),
            vocab_size=self.vocab_size,
            grid=self.grid,
            max_len=self.max_len,
            mlp_hidden_multiplier=self.mlp_hidden_multiplier,
            multitask_lambda=self.multitask_lambda,
            multitask_stages=list(self.multitask_stages),
            perceiver_init=self.perceiver_init,
        )

    def represented(self):
        return canonical_json(self.to_dict())

    def with_variant(self, variant, **overrides):
        """PipelineSpec: Copy of this spec, for another 'variant'"""
        data = self.to_dict()
        data.update(variant=variant, **overrides)
        return PipelineSpec.from_dict(data)

    @property
    def patch_count(self):
        """int: P, number of visual tokens"""
        return self.grid * self.grid

    @property
    def d_vit(self):
        return self.vit["d_vit"]

    @property
    def d_p(self):
        return self.perceiver_lm["d_p"]

    @property
    def d_t(self):
        return self.target_lm["d_t"]

    @property
    def is_dpa(self):
        return self.variant.startswith("dpa")

    @property
    def has_perceiver_lm(self):
        return self.is_dpa and self.variant != "dpa_no_lm_blocks"

    @property
    def effective_perceiver_init(self):
        """str: 'pretrained' or 'untrained', where perceiver weights come from for this variant"""
        if self.perceiver_init != "auto":
            return self.perceiver_init

        return "untrained" if self.variant in UNTRAINED_BY_DEFAULT else "pretrained"

    @property
    def projector_input(self):
        return self.d_p if self.is_dpa else self.d_vit

    @property
    def projector_hidden(self):
        if self.variant == "baseline_large_mlp":
            return int(round(self.d_t * self.mlp_hidden_multiplier))

        return self.d_t

    def multitask_active(self, stage):
        return self.variant == "dpa_multitask" and stage in self.multitask_stages and self.multitask_lambda > 0

    def problems(self):
        """Yields: Violated constraints, if any"""
        if self.variant not in VARIANTS:
            yield f"variant '{self.variant}' is not one of {', '.join(VARIANTS)}"

        if self.grid <= 0:
            yield "grid must be positive"

        stacks = [
            ("vit", self.vit, "d_vit"),
            ("perceiver_lm", self.perceiver_lm, "d_p"),
            ("target_lm", self.target_lm, "d_t"),
        ]
        for name, stack, dim in stacks:
            for key in (dim, "layers", "heads"):
                if not isinstance(stack.get(key), int) or stack[key] <= 0:
                    yield f"{name}.{key} must be a positive int"

            if isinstance(stack.get(dim), int) and isinstance(stack.get("heads"), int) and stack["heads"] > 0 and stack[dim] % stack["heads"]:
                yield f"{name}.heads ({stack['heads']}) must divide {name}.{dim} ({stack[dim]})"

        if not isinstance(self.vit.get("patch_dim"), int) or self.vit["patch_dim"] <= 0:
            yield "vit.patch_dim must be a positive int"

        if self.vocab_size < VOCAB.used_size:
            yield f"vocab_size must be at least {VOCAB.used_size}"

        if self.grid > 0 and self.max_len < 2 + self.patch_count:
            yield f"max_len must be at least {2 + self.patch_count}"

        if self.mlp_hidden_multiplier <= 0 or self.projector_hidden <= 0:
            yield "mlp_hidden_multiplier must be positive"

        if self.multitask_lambda < 0:
            yield "multitask_lambda must be >= 0"

        if any(s not in ("stage1", "stage2") for s in self.multitask_stages):
            yield "multitask_stages must be a subset of {stage1, stage2}"

        if self.perceiver_init not in ("auto", "pretrained", "untrained"):
            yield "perceiver_init must be one of auto, pretrained, untrained"

    def validate(self):
        for problem in self.problems():
            raise SpecValidationError(f"Invalid pipeline spec: {problem}")

        return self


class LayerActivations:
    """Per-layer hidden states of one stack (layer 0 is the stack input), with one modality tag per token"""

    def __init__(self, per_layer, modality_tags, component):
        """
        Args:
            per_layer (list[np.ndarray]): Layer index -> [tokens, dim]
            modality_tags (list[str]): 'visual' or 'text', one per token
            component (str): 'perceiver_lm' or 'target_lm'
        """
        self.per_layer = per_layer
        self.modality_tags = list(modality_tags)
        self.component = component

    def __repr__(self):
        return f"{self.component} activations: {runez.plural(self.per_layer, 'layer')} x {len(self.modality_tags)} tokens"

    @property
    def layer_count(self):
        return len(self.per_layer)

    def rows(self, layer, modality):
        """np.ndarray: Rows of 'layer' tagged with 'modality'"""
        mask = np.array([t == modality for t in self.modality_tags], dtype=bool)
        return self.per_layer[layer][mask]

    @classmethod
    def concatenated(cls, items, component):
        items = [a for a in items if a is not None]
        per_layer = [np.concatenate([a.per_layer[i] for a in items], axis=0) for i in range(items[0].layer_count)]
        return cls(per_layer, [t for a in items for t in a.modality_tags], component)


class Model:
    def __init__(self, spec, params, topology):
        """
        Args:
            spec (PipelineSpec): What this model implements
            params (ParamStore): All learnable weights
            topology (dict): Component -> ordered list of block prefixes
        """
        self.spec = spec
        self.params = params
        self.topology = topology

    def __repr__(self):
        return f"model {self.spec} with {self.params}"

    def __getitem__(self, name):
        return self.params[name]

    def lm_names(self, component):
        """dict: Param name prefixes used by the LM 'component'"""
        if component == "target_lm":
            return dict(embed="embed.", stack="target_lm.", head="head.", heads=self.spec.target_lm["heads"])

        if component == "perceiver_lm" and self.spec.has_perceiver_lm:
            return dict(embed="perceiver_lm.embed.", stack="perceiver_lm.", head="perceiver_lm.head.", heads=self.spec.perceiver_lm["heads"])

        raise VariantMismatchError(f"Model {self.spec.variant} has no '{component}' language model")


def param_group(name):
    """str: Optimizer group of parameter 'name': projector, vit or rest"""
    if name.startswith(("proj.", "proj_p.")):
        return "projector"

    if name.startswith("vit."):
        return "vit"

    return "rest"


def _block_shapes(d):
    h = 4 * d
    return dict(zip(BLOCK_PARAMS, [(d,), (d,), (d, d), (d, d), (d, d), (d, d), (d,), (d,), (d, h), (h,), (h, d), (d,)]))


def _param_shapes(spec):
    """Yields: (name, shape, residual depth) for every parameter of 'spec', residual depth is set for output projections"""
    v, p, dv, dp, dt = spec.vocab_size, spec.patch_count, spec.d_vit, spec.d_p, spec.d_t
    yield "vit.patch.w", (spec.vit["patch_dim"], dv), None
    yield "vit.patch.b", (dv,), None
    yield "vit.pos", (p, dv), None
    yield from _stack_shapes("vit", dv, spec.vit["layers"])
    if spec.is_dpa:
        yield from _mlp_shapes("proj_p", dv, dp, dp)

    if spec.has_perceiver_lm:
        yield from _lm_shapes("perceiver_lm.embed", "perceiver_lm", "perceiver_lm.head", v, spec.max_len, dp, spec.perceiver_lm["layers"])

    yield from _mlp_shapes("proj", spec.projector_input, spec.projector_hidden, dt)
    yield from _lm_shapes("embed", "target_lm", "head", v, spec.max_len, dt, spec.target_lm["layers"])


def _stack_shapes(prefix, d, layers):
    for i in range(layers):
        for key, shape in _block_shapes(d).items():
            yield f"{prefix}.block{i}.{key}", shape, layers if key in ("attn.wo", "mlp.w2") else None

    yield f"{prefix}.ln_f.g", (d,), None
    yield f"{prefix}.ln_f.b", (d,), None


def _mlp_shapes(prefix, d_in, hidden, d_out):
    yield f"{prefix}.fc1.w", (d_in, hidden), None
    yield f"{prefix}.fc1.b", (hidden,), None
    yield f"{prefix}.fc2.w", (hidden, d_out), None
    yield f"{prefix}.fc2.b", (d_out,), None


def _lm_shapes(embed, stack, head, vocab, max_len, d, layers):
    yield f"{embed}.tok", (vocab, d), None
    yield f"{embed}.pos", (max_len, d), None
    yield from _stack_shapes(stack, d, layers)
    yield f"{head}.w", (d, vocab), None
    yield f"{head}.b", (vocab,), None


def _initial_value(name, shape, depth, seed):
    if name.endswith((".g",)):
        return np.ones(shape)

    if len(shape) == 1:
        return np.zeros(shape)

    std = INIT_STD / math.sqrt(2 * depth) if depth else INIT_STD
    return Rng(seed, "init", name).normal(shape, std)


def build_pipeline(spec, seed):
    """
    Args:
        spec (PipelineSpec): What to build
        seed (int): Initialization seed

    Returns:
        (Model): Freshly initialized model, each parameter drawn from its own named stream
    """
    spec.validate()
    params = ParamStore()
    for name, shape, depth in _param_shapes(spec):
        params.add(name, _initial_value(name, shape, depth, seed))

    if spec.variant == "dpa_frozen_perceiver":
        params.set_trainable(PERCEIVER_PREFIXES, False)

    topology = {}
    for name in params.names():
        if ".block" in name:
            component, block = name.split(".")[:2]
            blocks = topology.setdefault(component, [])
            if f"{component}.{block}" not in blocks:
                blocks.append(f"{component}.{block}")

    for blocks in topology.values():
        blocks.sort(key=lambda x: int(x.rpartition("block")[2]))

    return Model(spec, params, topology)


def count_params(spec):
    """
    Args:
        spec (PipelineSpec): Spec to count parameters of, analytically

    Returns:
        (dict): Scalar count per component prefix (without trailing dot), plus 'total'
    """

    def block(d):
        return 12 * d * d + 9 * d

    def stack(d, layers):
        return layers * block(d) + 2 * d

    def mlp(d_in, hidden, d_out):
        return d_in * hidden + hidden + hidden * d_out + d_out

    v, p, dv, dp, dt = spec.vocab_size, spec.patch_count, spec.d_vit, spec.d_p, spec.d_t
    result = dict(vit=spec.vit["patch_dim"] * dv + dv + p * dv + stack(dv, spec.vit["layers"]))
    if spec.is_dpa:
        result["proj_p"] = mlp(dv, dp, dp)

    if spec.has_perceiver_lm:
        result["perceiver_lm"] = v * dp + spec.max_len * dp + stack(dp, spec.perceiver_lm["layers"]) + dp * v + v

    result["proj"] = mlp(spec.projector_input, spec.projector_hidden, dt)
    result["target_lm"] = stack(dt, spec.target_lm["layers"])
    result["embed"] = v * dt + spec.max_len * dt
    result["head"] = dt * v + v
    result["total"] = sum(result.values())
    return result


def _linear(model, x, prefix):
    return add(matmul(x, model[f"{prefix}.w"]), model[f"{prefix}.b"])


def _projector(model, x, prefix):
    with flops_scope(prefix):
        return _linear(model, gelu(_linear(model, x, f"{prefix}.fc1")), f"{prefix}.fc2")


def _block(model, x, prefix, heads, causal, cache=None):
    """Pre-LN transformer block; 'cache' (list with [k, v] arrays) accumulates keys/values for incremental decoding"""
    h = layer_norm(x, model[f"{prefix}.ln1.g"], model[f"{prefix}.ln1.b"])
    q = matmul(h, model[f"{prefix}.attn.wq"])
    k = matmul(h, model[f"{prefix}.attn.wk"])
    v = matmul(h, model[f"{prefix}.attn.wv"])
    offset = 0
    if cache is not None:
        if cache:
            offset = cache[0].shape[0]
            k = Tensor(np.concatenate([cache[0], k.data]))
            v = Tensor(np.concatenate([cache[1], v.data]))
            cache[0], cache[1] = k.data, v.data

        else:
            cache.extend([k.data, v.data])

    a = attention(q, k, v, heads, causal, offset=offset)
    x = add(x, matmul(a, model[f"{prefix}.attn.wo"]))
    h = layer_norm(x, model[f"{prefix}.ln2.g"], model[f"{prefix}.ln2.b"])
    h = gelu(add(matmul(h, model[f"{prefix}.mlp.w1"]), model[f"{prefix}.mlp.b1"]))
    return add(x, add(matmul(h, model[f"{prefix}.mlp.w2"]), model[f"{prefix}.mlp.b2"]))


def _run_stack(model, x, component, heads, causal, caches=None):
    """list[Tensor]: Stack input followed by the output of each block"""
    states = [x]
    with flops_scope(component):
        for i, prefix in enumerate(model.topology.get(component, ())):
            x = _block(model, x, prefix, heads, causal, cache=caches[i] if caches is not None else None)
            states.append(x)

    return states


def _patches(image):
    return image.patches if hasattr(image, "patches") else np.asarray(image, dtype=np.float64)


def encode_vit(model, image):
    """Tensor: [P, d_vit], bidirectional ViT over the image patches"""
    patches = Tensor(_patches(image))
    if patches.shape != [model.spec.patch_count, model.spec.vit["patch_dim"]]:
        raise DimensionError(f"Expecting patches of shape {[model.spec.patch_count, model.spec.vit['patch_dim']]}, got {patches.shape}")

    with flops_scope("vit"):
        x = add(_linear(model, patches, "vit.patch"), model["vit.pos"])

    states = _run_stack(model, x, "vit", model.spec.vit["heads"], causal=False)
    return layer_norm(states[-1], model["vit.ln_f.g"], model["vit.ln_f.b"])


def encode_visual_baseline(model, image):
    """Tensor: [P, d_t], ViT features through the projector"""
    if model.spec.is_dpa:
        raise VariantMismatchError(f"encode_visual_baseline() does not apply to variant {model.spec.variant}")

    return _projector(model, encode_vit(model, image), "proj")


def perceiver_visual(model, image):
    """Tensor: [P, d_p], ViT features through the perceiver projector (visual input of the perceiver LM)"""
    if not model.spec.is_dpa:
        raise VariantMismatchError(f"Variant {model.spec.variant} has no perceiver")

    return _projector(model, encode_vit(model, image), "proj_p")


def encode_visual_dpa(model, image, instruction=None):
    """
    Args:
        model (Model): A pre-aligned ('dpa*') model
        image (SynthImage | np.ndarray): Image (or its patches)
        instruction (list[int] | None): Instruction tokens, only for the instruction-context variant

    Returns:
        (Tensor): [P, d_t], final-layer perceiver states at visual positions, through the projector
    """
    spec = model.spec
    if not spec.is_dpa:
        raise VariantMismatchError(f"encode_visual_dpa() does not apply to variant {spec.variant}")

    if instruction is not None and spec.variant != "dpa_instruction_context":
        raise UsageError(f"Variant {spec.variant} does not take an instruction context")

    visual = perceiver_visual(model, image)
    if spec.has_perceiver_lm:
        names = model.lm_names("perceiver_lm")
        prefix = [VOCAB.bos] + list(instruction or [])
        x = concat([embedding(model[f"{names['embed']}tok"], prefix), visual])
        n = x.shape[0]
        if n > spec.max_len:
            raise DimensionError(f"Perceiver input of {n} tokens exceeds max_len {spec.max_len}")

        x = add(x, take(model[f"{names['embed']}pos"], 0, n))
        states = _run_stack(model, x, "perceiver_lm", names["heads"], causal=True)
        final = layer_norm(states[-1], model["perceiver_lm.ln_f.g"], model["perceiver_lm.ln_f.b"])
        visual = take(final, len(prefix), n)

    return _projector(model, visual, "proj")


def encode_visual(model, image, instruction=None):
    """Tensor: [P, d_t] visual soft tokens for the target LM, whatever the variant"""
    if not model.spec.is_dpa:
        return encode_visual_baseline(model, image)

    if model.spec.variant != "dpa_instruction_context":
        instruction = None

    return encode_visual_dpa(model, image, instruction=instruction)


def _lm_pass(model, component, visual, tokens, caches=None, offset=0):
    names = model.lm_names(component)
    spec = model.spec
    tokens = list(tokens)
    if not tokens:
        raise DimensionError("Language model needs at least one token")

    d = model[f"{names['embed']}tok"].shape[1]
    if visual is not None and (len(visual.shape) != 2 or visual.shape[1] != d):
        raise DimensionError(f"Visual embeddings of shape {visual.shape} don't match {component} dim {d}")

    x = embedding(model[f"{names['embed']}tok"], tokens)
    p = 0
    if visual is not None:
        p = visual.shape[0]
        x = concat([take(x, 0, 1), visual, take(x, 1, len(tokens))])

    n = x.shape[0]
    if offset + n > spec.max_len:
        raise DimensionError(f"Sequence of {offset + n} tokens exceeds max_len {spec.max_len}")

    x = add(x, take(model[f"{names['embed']}pos"], offset, offset + n))
    states = _run_stack(model, x, component, names["heads"], causal=True, caches=caches)
    stack = names["stack"]
    hidden = layer_norm(states[-1], model[f"{stack}ln_f.g"], model[f"{stack}ln_f.b"])
    if p:
        hidden = concat([take(hidden, 0, 1), take(hidden, 1 + p, n)])

    with flops_scope(component):
        logits = add(matmul(hidden, model[f"{names['head']}w"]), model[f"{names['head']}b"])

    tags = ["text"] + ["visual"] * p + ["text"] * (len(tokens) - 1) if offset == 0 else ["text"] * n
    return logits, LayerActivations([s.data for s in states], tags, component)


def forward_lm(model, visual_embeds, tokens, component="target_lm"):
    """
    Args:
        model (Model): Model to run
        visual_embeds (Tensor | None): [P, d] visual soft tokens, inserted right after the leading BOS token
        tokens (list[int]): Text tokens, starting with BOS
        component (str): 'target_lm', or 'perceiver_lm' for the standalone perceiver VLM

    Returns:
        (Tensor, LayerActivations): Logits [T, V] for the text positions, and per-layer states of the whole sequence
    """
    return _lm_pass(model, component, visual_embeds, tokens)


def sample_visual(model, sample, component="target_lm"):
    """Tensor | None: Visual tokens 'component' gets for 'sample'"""
    if sample.image is None:
        return None

    if component == "perceiver_lm":
        return perceiver_visual(model, sample.image)

    return encode_visual(model, sample.image, instruction=sample.prompt)


def generate_greedy(model, sample, max_new, component="target_lm", stop_at_eos=True):
    """
    Args:
        model (Model): Model to decode with
        sample (prealign.corpus.Sample): Sample providing image and prompt
        max_new (int): Max number of tokens to generate
        component (str): Language model to decode with
        stop_at_eos (bool): If False, keep generating 'max_new' tokens even past EOS

    Returns:
        (list[int]): Generated tokens (EOS excluded)
    """
    if max_new < 1:
        raise UsageError("max_new must be >= 1")

    visual = sample_visual(model, sample, component)
    caches = [[] for _ in model.topology.get(component, ())]
    prompt = [VOCAB.bos] + list(sample.prompt)
    logits, acts = _lm_pass(model, component, visual, prompt, caches=caches)
    position = len(acts.modality_tags)
    result = []
    while True:
        token = int(np.argmax(logits.data[-1]))
        if stop_at_eos and token == VOCAB.eos:
            break

        result.append(token)
        if len(result) >= max_new:
            break

        logits, _ = _lm_pass(model, component, None, [token], caches=caches, offset=position)
        position += 1

    return result


def collect_hidden_states(model, samples):
    """
    Args:
        model (Model): Model to run
        samples (list[prealign.corpus.Sample]): Samples to run through each language model

    Returns:
        (dict): Component -> LayerActivations, concatenated over the batch
    """
    if not samples:
        raise UsageError("Need at least one sample to collect hidden states")

    result = {}
    components = ["perceiver_lm", "target_lm"] if model.spec.has_perceiver_lm else ["target_lm"]
    for component in components:
        acts = []
        for sample in samples:
            _, a = forward_lm(model, sample_visual(model, sample, component), sample.tokens, component=component)
            acts.append(a)

        result[component] = LayerActivations.concatenated(acts, component)

    return result


def adopt(model, params, prefixes):
    """
    Args:
        model (Model): Model to update
        params (dict): Name -> array, typically from a checkpoint
        prefixes (tuple): Only names starting with one of these are adopted

    Returns:
        (list[str]): Adopted names
    """
    adopted = []
    for name in model.params.names():
        if name.startswith(prefixes):
            if name not in params:
                raise CheckpointMismatchError(f"Checkpoint has no parameter '{name}'")

            if tuple(params[name].shape) != tuple(model[name].data.shape):
                raise CheckpointMismatchError(f"Parameter '{name}': checkpoint has shape {list(params[name].shape)}, model {model[name].shape}")

            model.params.assign(name, params[name])
            adopted.append(name)

    return adopted
