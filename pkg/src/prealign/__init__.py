import copy
import json
import logging
import os
import sys

import runez


__version__ = "1.0.0"
LOG = logging.getLogger(__name__)
PREALIGN = "prealign"
K_DIRECTIVES = {"include"}
K_SECTIONS = {"analysis", "corpus", "spec", "sweep"}
K_LEAVES = {"eval", "output_dir", "seed", "stages"}

EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_INCOMPATIBLE = 4
EXIT_MISSING_METRICS = 5
EXIT_DEGENERATE = 6

VARIANTS = (
    "baseline_vit",
    "baseline_large_mlp",
    "baseline_prealigned_vit",
    "dpa",
    "dpa_untrained_perceiver",
    "dpa_no_lm_blocks",
    "dpa_no_lm_pretraining",
    "dpa_frozen_perceiver",
    "dpa_instruction_context",
    "dpa_multitask",
)
STAGES = ("stage0", "perceiver", "stage1", "stage2")
SCHEDULES = ("warmup_stable_decay", "cosine")
ANALYSES = ("gap", "similarity", "adaptation", "flops")


class PrealignError(Exception):
    """Base of all errors that carry a CLI exit code"""

    exit_code = 1


class ConfigError(PrealignError):
    exit_code = EXIT_CONFIG


class MissingPrerequisiteError(PrealignError):
    exit_code = EXIT_PREREQUISITE


class CheckpointMismatchError(PrealignError):
    exit_code = EXIT_INCOMPATIBLE


class MissingMetricsError(PrealignError):
    exit_code = EXIT_MISSING_METRICS


class DegenerateInputError(PrealignError):
    exit_code = EXIT_DEGENERATE


def abort(message, code=1):
    message = runez.stringified(message)
    print(message)
    _log_to_file(message, error=True)
    sys.exit(code)


def inform(message):
    """
    Args:
        message: Message to print and log at level INFO
    """
    message = runez.stringified(message)
    print(message)
    _log_to_file(message)


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data, value=FNV_OFFSET):
    """
    Args:
        data (bytes | str): Content to hash
        value (int): Running hash, allows to hash content in several chunks

    Returns:
        (int): 64-bit FNV-1a hash
    """
    if isinstance(data, str):
        data = data.encode("utf-8")

    for byte in data:
        value = ((value ^ byte) * FNV_PRIME) & _MASK64

    return value


def hex_hash(value):
    return "%016x" % value


def canonical_json(data):
    """str: Compact, key-sorted json, the form all hashes are computed over"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(data):
    return hex_hash(fnv1a_64(canonical_json(data)))


class Choice:
    def __init__(self, *choices):
        self.choices = choices

    def problem(self, value):
        if value not in self.choices:
            return f"expecting one of {', '.join(str(c) for c in self.choices)}, got '{value}'"


class Number:
    def __init__(self, kind=float, min_value=None, nullable=False):
        self.kind = kind
        self.min_value = min_value
        self.nullable = nullable

    def problem(self, value):
        if value is None and self.nullable:
            return None

        if isinstance(value, bool) or not isinstance(value, (int, float)) or (self.kind is int and not isinstance(value, int)):
            return f"expecting {self.kind.__name__}, got '{value}'"

        if self.min_value is not None and value < self.min_value:
            return f"must be >= {self.min_value}, got {value}"


class ListOf:
    def __init__(self, item, min_length=0, max_length=None):
        self.item = item
        self.min_length = min_length
        self.max_length = max_length


class NonEmptyString:
    def problem(self, value):
        if not isinstance(value, str) or not value.strip():
            return f"expecting a non-empty string, got '{value}'"


POSITIVE = Number(int, 1)
NON_NEGATIVE = Number(int, 0)
SHAPE_SCHEMA = {"layers": POSITIVE, "heads": POSITIVE}
TRAIN_SCHEMA = {
    "stage": Choice(*STAGES),
    "max_lr": {"projector": Number(float, 0), "rest": Number(float, 0), "vit": Number(float, 0, nullable=True)},
    "schedule": Choice(*SCHEDULES),
    "warmup_steps": NON_NEGATIVE,
    "epochs": POSITIVE,
    "batch_size": POSITIVE,
    "weight_decay": Number(float, 0),
    "betas": ListOf(Number(float, 0), 2, 2),
    "grad_clip_norm": Number(float, 0),
    "multitask_lambda": Number(float, 0, nullable=True),
    "seed": Number(int, 0, nullable=True),
    "snapshot_every": NON_NEGATIVE,
    "loss_on": Choice("answer", "sequence"),
    "train_perceiver_projector": Choice("auto", "always", "never"),
    "budget": NON_NEGATIVE,
}
RUN_CONFIG_SCHEMA = {
    "include": None,
    "spec": {
        "variant": Choice(*VARIANTS),
        "vit": dict(SHAPE_SCHEMA, patch_dim=Number(int, 0), d_vit=POSITIVE),
        "perceiver_lm": dict(SHAPE_SCHEMA, d_p=POSITIVE),
        "target_lm": dict(SHAPE_SCHEMA, d_t=POSITIVE),
        "vocab_size": POSITIVE,
        "grid": POSITIVE,
        "max_len": NON_NEGATIVE,
        "mlp_hidden_multiplier": Number(float, 0),
        "multitask_lambda": Number(float, 0),
        "multitask_stages": ListOf(Choice("stage1", "stage2")),
        "perceiver_init": Choice("auto", "pretrained", "untrained"),
    },
    "corpus": {
        "seed": NON_NEGATIVE,
        "density": Number(float, 0),
        "noise": Number(float, 0),
        "shapes": POSITIVE,
        "colors": POSITIVE,
        "stage0": POSITIVE,
        "stage1": POSITIVE,
        "stage2": POSITIVE,
        "eval": POSITIVE,
        "text_fraction": Number(float, 0),
    },
    "stages": ListOf(TRAIN_SCHEMA, 1),
    "eval": ListOf(Choice("eval_general_vqa", "eval_counting", "eval_text"), 1),
    "analysis": {
        "gap": Choice(True, False),
        "similarity": Choice(True, False),
        "adaptation": Choice(True, False),
        "flops": Choice(True, False),
        "sample_count": POSITIVE,
        "prompt_len": POSITIVE,
        "gen_len": POSITIVE,
        "train_tokens": POSITIVE,
        "throughput_repeats": POSITIVE,
    },
    "sweep": {"budgets": ListOf(NON_NEGATIVE), "include_baseline": Choice(True, False)},
    "output_dir": NonEmptyString(),
    "seed": NON_NEGATIVE,
}

DEFAULT_STAGES = {
    "stage0": dict(
        stage="stage0", max_lr=dict(projector=1e-3, rest=1e-3, vit=None), schedule="cosine", warmup_steps=200, epochs=1,
        batch_size=16, weight_decay=0.01, betas=[0.9, 0.999], grad_clip_norm=1.0, multitask_lambda=None, seed=None,
        snapshot_every=0, loss_on="answer", train_perceiver_projector="auto", budget=0,
    ),
    "perceiver": dict(stage="perceiver", budget=20000, seed=None),
    # Paper values are 1e-3 (stage-1) and 1e-5 (stage-2); a from-scratch toy target LM under-trains at 1e-5
    "stage1": dict(
        stage="stage1", max_lr=dict(projector=1e-3, rest=1e-3, vit=None), schedule="warmup_stable_decay", warmup_steps=100, epochs=1,
        batch_size=8, weight_decay=0.01, betas=[0.9, 0.999], grad_clip_norm=1.0, multitask_lambda=None, seed=None,
        snapshot_every=0, loss_on="answer", train_perceiver_projector="auto", budget=0,
    ),
    "stage2": dict(
        stage="stage2", max_lr=dict(projector=3e-4, rest=3e-4, vit=6e-5), schedule="cosine", warmup_steps=100, epochs=1,
        batch_size=8, weight_decay=0.01, betas=[0.9, 0.999], grad_clip_norm=1.0, multitask_lambda=None, seed=None,
        snapshot_every=200, loss_on="answer", train_perceiver_projector="auto", budget=0,
    ),
}

DEFAULTS = dict(
    spec=dict(
        variant="dpa",
        vit=dict(patch_dim=0, d_vit=32, layers=2, heads=4),
        perceiver_lm=dict(d_p=48, layers=4, heads=4),
        target_lm=dict(d_t=64, layers=6, heads=4),
        vocab_size=64,
        grid=4,
        max_len=0,
        mlp_hidden_multiplier=5.0,
        multitask_lambda=0.5,
        multitask_stages=["stage1"],
        perceiver_init="auto",
    ),
    corpus=dict(
        seed=0, density=0.25, noise=0.05, shapes=6, colors=8, stage0=50000, stage1=20000, stage2=20000, eval=1000, text_fraction=0.2
    ),
    stages=[{"stage": "stage0"}, {"stage": "perceiver"}, {"stage": "stage1"}, {"stage": "stage2"}],
    eval=["eval_general_vqa", "eval_counting", "eval_text"],
    analysis=dict(
        gap=True, similarity=True, adaptation=True, flops=True, sample_count=32, prompt_len=10, gen_len=8, train_tokens=40,
        throughput_repeats=3,
    ),
    sweep=dict(budgets=[0, 1000, 5000, 20000], include_baseline=True),
    seed=0,
)


def schema_problems(value, schema, path=""):
    """
    Args:
        value: Value to validate
        schema: Schema node (dict, ListOf, or object with a problem() method)
        path (str): Schema path of 'value', used in reported problems

    Yields:
        (str, str): Schema path and problem description
    """
    if schema is None:
        return

    if isinstance(schema, dict):
        if not isinstance(value, dict):
            yield path or "<root>", f"expecting an object, got '{value}'"
            return

        for key, item in value.items():
            sub_path = f"{path}.{key}" if path else key
            if key not in schema:
                yield sub_path, "unknown key"

            else:
                yield from schema_problems(item, schema[key], sub_path)

        return

    if isinstance(schema, ListOf):
        if not isinstance(value, list):
            yield path, f"expecting a list, got '{value}'"
            return

        if len(value) < schema.min_length or (schema.max_length is not None and len(value) > schema.max_length):
            yield path, f"unexpected length {len(value)}"

        for i, item in enumerate(value):
            yield from schema_problems(item, schema.item, f"{path}[{i}]")

        return

    problem = schema.problem(value)
    if problem:
        yield path, problem


def deep_merged(base, override):
    """dict: 'override' applied on top of a copy of 'base', nested dicts are merged (lists are replaced)"""
    result = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = deep_merged(result[key], value)

        else:
            result[key] = copy.deepcopy(value)

    return result


class RunConfig:
    """Layered run configuration: CLI overrides, then config file(s), then built-in defaults"""

    configs = None  # type: list

    def __init__(self, config_path=None, variant=None, seed=None):
        """
        Args:
            config_path (str | None): Path to json config file
            variant (str | None): Optional variant override (from CLI)
            seed (int | None): Optional seed override (from CLI)
        """
        self.config_path = config_path
        self.cli_seed = seed
        self.configs = []
        cli = {}
        if variant:
            cli["spec"] = dict(variant=variant)

        if seed is not None:
            cli["seed"] = seed

        output_dir = os.environ.get("DPA_OUTPUT_DIR")
        if output_dir:
            cli["output_dir"] = output_dir

        self.configs.append(RawConfig(self, "cli", cli))
        if config_path:
            self._add_config_file(config_path)

        self.configs.append(RawConfig(self, "defaults", DEFAULTS))

    def __repr__(self):
        return runez.short(self.config_path) if self.config_path else "<defaults>"

    def _add_config_file(self, path, base=None):
        path = runez.resolved_path(path, base=base)
        if any(c.source == path for c in self.configs):
            return

        if not path or not os.path.exists(path):
            raise ConfigError(f"Config file {runez.short(path)} does not exist")

        values = runez.read_json(path, default=None)
        if not isinstance(values, dict):
            raise ConfigError(f"Config file {runez.short(path)} is not a json object")

        for problem_path, problem in schema_problems(values, RUN_CONFIG_SCHEMA):
            raise ConfigError(f"{runez.short(path)}: {problem_path}: {problem}")

        self.configs.append(RawConfig(self, path, values))
        included = values.get("include")
        if included:
            for additional in runez.flattened(included):
                self._add_config_file(additional, base=os.path.dirname(path))

    def get_value(self, key):
        """
        Args:
            key (str): Top-level key to look up

        Returns:
            Value from first RawConfig that defines it
        """
        for c in self.configs:
            value = c.get_value(key)
            if value is not None:
                return value

    @runez.cached_property
    def resolved(self):
        """dict: Fully merged document, validated against RUN_CONFIG_SCHEMA"""
        result = {}
        for c in reversed(self.configs):
            result = deep_merged(result, c.values)

        result.pop("include", None)
        result["spec"] = resolved_spec(result["spec"], result["corpus"])
        result["corpus"]["grid"] = result["spec"]["grid"]
        result["stages"] = [resolved_stage(s, result["seed"]) for s in result["stages"]]
        if not result.get("output_dir"):
            raise ConfigError("output_dir: missing (set it in config, or via DPA_OUTPUT_DIR)")

        corpus_schema = dict(RUN_CONFIG_SCHEMA["corpus"], grid=POSITIVE)
        for problem_path, problem in schema_problems(result, dict(RUN_CONFIG_SCHEMA, corpus=corpus_schema)):
            raise ConfigError(f"{problem_path}: {problem}")

        return result

    @property
    def output_dir(self):
        return runez.resolved_path(self.resolved["output_dir"], base=os.path.dirname(self.config_path) if self.config_path else None)

    @property
    def seed(self):
        return self.resolved["seed"]

    @runez.cached_property
    def hash(self):
        """str: FNV-1a of the canonical resolved document (output_dir excluded, it does not affect results)"""
        data = dict(self.resolved)
        data.pop("output_dir", None)
        return config_hash(data)

    def stage_config(self, stage):
        """
        Args:
            stage (str): Stage name (stage0, perceiver, stage1 or stage2)

        Returns:
            (dict): Resolved settings for that stage
        """
        for item in self.resolved["stages"]:
            if item["stage"] == stage:
                return item

        if stage in DEFAULT_STAGES:
            LOG.debug("No '%s' entry in stages, using defaults", stage)
            return resolved_stage({"stage": stage}, self.seed)

        raise ConfigError(f"stages: no '{stage}' entry configured")

    def with_variant(self, variant):
        """RunConfig: Same configuration, for another pipeline 'variant'"""
        return RunConfig(self.config_path, variant=variant, seed=self.cli_seed)

    @staticmethod
    def colored_key(key, indent):
        if key in K_LEAVES and indent == 1:
            return runez.teal(key)

        if key in K_DIRECTIVES and indent == 1:
            return runez.dim(key)

        if key in K_SECTIONS and indent == 1:
            return runez.purple(key)

        if indent >= 2:
            return runez.bold(key)

        return runez.red(key)

    def represented(self):
        """str: Human readable representation of this configuration"""
        result = [f"{runez.bold('config')}: {self}", ""]
        for c in self.configs:
            result.append(c.represented())

        return "\n".join(result).strip()


def resolved_spec(spec, corpus):
    """dict: Pipeline spec with derived defaults filled in (patch_dim from corpus, perceiver_init from variant)"""
    spec = deep_merged(spec, {})
    patch_dim = corpus["shapes"] + corpus["colors"]
    if not spec["vit"].get("patch_dim"):
        spec["vit"] = dict(spec["vit"], patch_dim=patch_dim)

    elif spec["vit"]["patch_dim"] != patch_dim:
        raise ConfigError(f"spec.vit.patch_dim: must equal corpus shapes + colors ({patch_dim}), got {spec['vit']['patch_dim']}")

    return spec


def resolved_stage(stage, seed):
    """dict: Stage entry with defaults for its stage name applied"""
    name = stage.get("stage")
    if name not in DEFAULT_STAGES:
        raise ConfigError(f"stages: unknown stage '{name}'")

    result = deep_merged(DEFAULT_STAGES[name], stage)
    if result.get("seed") is None:
        result["seed"] = seed

    return result


class FolderBase:
    """
    This class allows to more easily deal with folders
    """

    def __init__(self, name, path):
        """
        Args:
            name (str): Internal name of this folder
            path (str): Path to folder
        """
        self.name = name
        self.path = path

    def __repr__(self):
        return self.path

    def iterdir(self):
        path = runez.to_path(self.path)
        if path.is_dir():
            yield from sorted(path.iterdir())

    def full_path(self, *relative):
        """
        Args:
            *relative: Relative path components

        Returns:
            (str): Full path based on `self.path`
        """
        return os.path.join(self.path, *relative)


def _log_to_file(message, error=False):
    if runez.log.file_handler is not None:
        # Avoid to log twice to console
        prev_level = None
        c = runez.log.console_handler
        if c is not None and c.level < logging.CRITICAL:
            prev_level = c.level
            c.level = logging.CRITICAL

        message = runez.uncolored(message)
        if error:
            logging.error(message)

        else:
            logging.info(message)

        if prev_level is not None:
            c.level = prev_level


class RawConfig:
    """Represents one configuration source: one particular file, CLI overrides, or hardcoded defaults"""

    def __init__(self, parent, source, values):
        self.parent = parent
        self.source = source
        self.values = values

    def __repr__(self):
        return f"{runez.short(self.source)} ({runez.plural(self.values)})"

    def get_value(self, key):
        """
        Args:
            key (str): Key to look up

        Returns:
            Value, if any
        """
        return self.values.get(key)

    def _add_dict_representation(self, result, data, indent=1):
        """
        Args:
            result (list): Where to add lines representing 'data'
            data (dict): Data to represent
            indent (int): Indentation to use
        """
        padding = "  " * indent
        for key, value in sorted(data.items()):
            key = self.parent.colored_key(key, indent)
            if isinstance(value, dict):
                result.append(f"{padding}{key}:")
                self._add_dict_representation(result, value, indent=indent + 1)

            elif isinstance(value, list):
                result.append(f"{padding}{key}:")
                for item in value:
                    result.append(f"{padding} - {runez.short(item)}")

            else:
                result.append(f"{padding}{key}: {runez.short(value)}")

    def represented(self):
        """str: Human readable representation of this configuration"""
        result = [f"{runez.bold(runez.short(self.source))}:"]
        if self.values:
            self._add_dict_representation(result, self.values)

        else:
            result[0] += runez.dim("  # empty")

        result.append("")
        return "\n".join(result)
