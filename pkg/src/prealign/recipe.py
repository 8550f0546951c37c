"""
Run folder layout and orchestration of stages, analyses, comparisons and perceiver sweeps.

Layout of an output_dir:
    corpus.dpacorp
    seed<S>/                        shared by all variants: stage-0 LMs, standalone perceivers
    <variant>/seed<S>/              stage1.ckpt, stage2.ckpt, snapshots/, metrics.csv, run.log, analysis/
    sweep/                          perceiver budget sweep runs and correlation reports
"""

import logging
import os

import numpy as np
import runez

from prealign import (
    CheckpointMismatchError,
    ConfigError,
    DEFAULTS,
    DegenerateInputError,
    FolderBase,
    inform,
    MissingMetricsError,
    MissingPrerequisiteError,
    VARIANTS,
)
from prealign.analysis import (
    adaptation_report,
    count_flops,
    cross_layer_similarity,
    measure_throughput,
    pearson,
    per_layer_gap,
)
from prealign.corpus import build_corpus, Corpus, CorpusSettings
from prealign.model import adopt, build_pipeline, collect_hidden_states, PipelineSpec
from prealign.reports import load_metrics, MetricsLog, similarity_svg, TabularReport, write_json, write_table
from prealign.trainer import (
    Checkpoint,
    evaluate,
    LM_PREFIXES,
    pretrain_text,
    train_perceiver,
    train_stage1,
    train_stage2,
    TrainConfig,
)


LOG = logging.getLogger(__name__)
COMPARED_COLUMNS = ["general_vqa", "counting", "multimodal_avg", "text", "forgetting_delta"]
MULTIMODAL_GROUPS = ("general_vqa", "counting")


def load_checkpoint(path, produced_by=None):
    """
    Args:
        path (str): Checkpoint to load
        produced_by (str | None): Stage that produces it, mentioned in error message when missing

    Returns:
        (Checkpoint): Loaded checkpoint
    """
    if not path or not os.path.exists(path):
        hint = f", run 'prealign train --stage {produced_by}' first" if produced_by else ""
        raise MissingPrerequisiteError(f"Missing prerequisite checkpoint {runez.short(path)}{hint}")

    return Checkpoint.load(path)


class Recipe:
    """Stages of one (variant, seed) run, as configured by a RunConfig"""

    def __init__(self, cfg, budget=None, run_path=None):
        """
        Args:
            cfg (prealign.RunConfig): Run configuration
            budget (int | None): Perceiver budget to use (default: from 'perceiver' stage entry)
            run_path (str | None): Custom run folder (default: <output_dir>/<variant>/seed<S>)
        """
        self.cfg = cfg
        self.spec = PipelineSpec.from_dict(cfg.resolved["spec"]).validate()
        self.seed = cfg.seed
        self.root = FolderBase("output", cfg.output_dir)
        self.shared = FolderBase("shared", self.root.full_path(f"seed{self.seed}"))
        self.run = FolderBase(self.spec.variant, run_path or self.root.full_path(self.spec.variant, f"seed{self.seed}"))
        self.budget = cfg.stage_config("perceiver")["budget"] if budget is None else budget
        self.metrics = MetricsLog(self.run.path)

    def __repr__(self):
        return f"{self.spec.variant} seed {self.seed}"

    @property
    def corpus_path(self):
        return self.root.full_path("corpus.dpacorp")

    def stage0_path(self, component):
        return self.shared.full_path(f"stage0-{component}.ckpt")

    def perceiver_path(self, budget=None):
        return self.shared.full_path(f"perceiver-b{self.budget if budget is None else budget}.ckpt")

    def checkpoint_path(self, stage):
        """str: Where 'stage' (stage1 or stage2) checkpoint of this run lives"""
        return self.run.full_path(f"{stage}.ckpt")

    @property
    def snapshots(self):
        return FolderBase("snapshots", self.run.full_path("snapshots"))

    @property
    def corpus_settings(self):
        return CorpusSettings.from_dict(self.cfg.resolved["corpus"])

    def generate_corpus(self):
        """Corpus: Freshly generated corpus, saved to 'corpus_path'"""
        corpus = build_corpus(self.corpus_settings)
        corpus.save(self.corpus_path)
        return corpus

    @runez.cached_property
    def corpus(self):
        if not os.path.exists(self.corpus_path):
            raise MissingPrerequisiteError(f"Missing prerequisite corpus {runez.short(self.corpus_path)}, run 'prealign gen-data' first")

        corpus = Corpus.load(self.corpus_path)
        expected = Corpus(self.corpus_settings, {}).meta
        for key in ("master_seed", "grid", "shapes", "colors", "density", "noise"):
            if corpus.meta[key] != expected[key]:
                raise ConfigError(f"corpus.{key}: {runez.short(self.corpus_path)} has {corpus.meta[key]}, config says {expected[key]}")

        return corpus

    @property
    def eval_splits(self):
        return {name: self.corpus.splits[name] for name in self.cfg.resolved["eval"]}

    @property
    def meta(self):
        """dict: Provenance recorded in every checkpoint of this run"""
        return dict(config_hash=self.cfg.hash, corpus_hash=self.corpus.hash)

    def train_config(self, stage, seed=None):
        settings = dict(self.cfg.stage_config(stage))
        if seed is not None:
            settings["seed"] = seed

        return TrainConfig.from_dict(settings)

    def verify(self, ckpt, path):
        """Refuse to resume from a checkpoint made with another spec or corpus, warn when it was made with another config"""
        if ckpt.spec != self.spec:
            raise CheckpointMismatchError(f"{runez.short(path)} was trained for {ckpt.spec}, current spec is {self.spec}")

        corpus_hash = ckpt.meta.get("corpus_hash")
        if corpus_hash and corpus_hash != self.corpus.hash:
            raise CheckpointMismatchError(f"{runez.short(path)} was trained on another corpus ({corpus_hash})")

        config_hash = ckpt.meta.get("config_hash")
        if config_hash and config_hash != self.cfg.hash:
            LOG.warning("%s was trained with config %s, current config is %s", runez.short(path), config_hash, self.cfg.hash)

    def ensure(self, stage):
        """Run 'stage' unless its output already exists"""
        if stage == "stage0":
            if not all(os.path.exists(self.stage0_path(c)) for c in LM_PREFIXES):
                self.run_stage0()

        elif stage == "perceiver":
            if not os.path.exists(self.perceiver_path()):
                self.run_perceiver()

        elif not os.path.exists(self.checkpoint_path(stage)):
            self.run_stage(stage)

    def run_stage(self, stage):
        """
        Args:
            stage (str): One of stage0, perceiver, stage1, stage2

        Returns:
            (Checkpoint): Main checkpoint produced by the stage
        """
        return getattr(self, f"run_{stage}")()

    def run_stage0(self):
        cfg = self.train_config("stage0")
        metrics = {}
        result = None
        for component in LM_PREFIXES:
            ckpt = pretrain_text(self.spec, component, self.corpus.splits["stage0"], cfg, **self.meta)
            report = evaluate(ckpt.to_model(self.seed), {"eval_text": self.corpus.splits["eval_text"]}, component=component)
            ckpt.meta["text_accuracy"] = report.accuracies["text"]
            ckpt.save(self.stage0_path(component))
            metrics[f"{component}_text_accuracy"] = report.accuracies["text"]
            result = result or ckpt

        MetricsLog(self.shared.path).record("shared", self.seed, "stage0", metrics, self.cfg.hash)
        inform(f"Stage-0 text accuracy: {runez.joined([f'{k}={v:.3f}' for k, v in metrics.items()], delimiter=', ')}")
        return result

    def run_perceiver(self):
        """Checkpoint: Standalone perceiver VLM trained with 'self.budget' instruction samples"""
        stage0 = load_checkpoint(self.stage0_path("perceiver_lm"), "stage0")
        seed = self.cfg.stage_config("perceiver")["seed"]
        model = build_pipeline(self.spec.with_variant("dpa", perceiver_init="auto"), self.seed)
        adopt(model, stage0.params, LM_PREFIXES["perceiver_lm"])
        instructions = self.corpus.splits["stage2"]
        if self.budget > len(instructions):
            LOG.warning("Perceiver budget %s exceeds stage2 split size %s", self.budget, len(instructions))

        ckpt = train_perceiver(
            model,
            self.corpus.splits["stage1"],
            instructions,
            self.train_config("stage1", seed=seed),
            self.train_config("stage2", seed=seed),
            self.budget,
            **self.meta,
        )
        report = evaluate(model, self.eval_splits, component="perceiver_lm")
        ckpt.meta["scores"] = report.accuracies
        ckpt.save(self.perceiver_path())
        MetricsLog(self.shared.path).record("perceiver", self.seed, f"perceiver-b{self.budget}", report.to_dict(), self.cfg.hash, ckpt.hash)
        inform(f"Perceiver with budget {self.budget}: {report}")
        return ckpt

    def initialize(self, model):
        """Load pre-trained weights into a fresh 'model', as its variant prescribes"""
        spec = model.spec
        target = load_checkpoint(self.stage0_path("target_lm"), "stage0")
        adopt(model, target.params, LM_PREFIXES["target_lm"])
        if spec.variant == "baseline_prealigned_vit":
            adopt(model, load_checkpoint(self.perceiver_path(), "perceiver").params, ("vit.",))

        elif spec.is_dpa and spec.effective_perceiver_init == "pretrained":
            prefixes = ("vit.", "proj_p.", "perceiver_lm.") if spec.has_perceiver_lm else ("vit.", "proj_p.")
            adopt(model, load_checkpoint(self.perceiver_path(), "perceiver").params, prefixes)

        elif spec.has_perceiver_lm and spec.variant != "dpa_no_lm_pretraining":
            adopt(model, load_checkpoint(self.stage0_path("perceiver_lm"), "stage0").params, LM_PREFIXES["perceiver_lm"])

    def run_stage1(self):
        model = build_pipeline(self.spec, self.seed)
        self.initialize(model)
        cfg = self.train_config("stage1")
        ckpt = train_stage1(model, self.corpus.splits["stage1"], cfg, variant=self.spec.variant, **self.meta)
        ckpt.save(self.checkpoint_path("stage1"))
        losses = dict(initial_loss=ckpt.meta["initial_loss"], final_loss=ckpt.meta["final_loss"])
        self.metrics.record(self.spec.variant, self.seed, "stage1", losses, self.cfg.hash, ckpt.hash)
        inform(f"Stage-1 of {self}: loss {losses['initial_loss']:.4f} -> {losses['final_loss']:.4f}")
        return ckpt

    def run_stage2(self):
        path = self.checkpoint_path("stage1")
        stage1 = load_checkpoint(path, "stage1")
        self.verify(stage1, path)
        target = load_checkpoint(self.stage0_path("target_lm"), "stage0")
        model = stage1.to_model(self.seed)
        snapshots = self.snapshots
        runez.delete(snapshots.path, logger=False)

        def on_snapshot(snapshot):
            snapshot.save(snapshots.full_path(f"step{snapshot.meta['step']:06d}.ckpt"))

        cfg = self.train_config("stage2")
        ckpt = train_stage2(model, self.corpus.splits["stage2"], cfg, on_snapshot=on_snapshot, variant=self.spec.variant, **self.meta)
        ckpt.save(self.checkpoint_path("stage2"))
        report = evaluate(model, self.eval_splits, stage0_text_accuracy=target.meta.get("text_accuracy"))
        metrics = dict(initial_loss=ckpt.meta["initial_loss"], final_loss=ckpt.meta["final_loss"], **report.to_dict())
        self.metrics.record(self.spec.variant, self.seed, "stage2", metrics, self.cfg.hash, ckpt.hash)
        inform(f"Stage-2 of {self}: {report}")
        return ckpt


class Analysis:
    """Analyses of one checkpoint, optionally against another one, written to <checkpoint folder>/analysis/"""

    def __init__(self, checkpoint_path, against_path=None, cfg=None):
        """
        Args:
            checkpoint_path (str): Checkpoint to analyze
            against_path (str | None): Checkpoint to compare with
            cfg (prealign.RunConfig | None): Config locating the corpus (needed for activation-based analyses)
        """
        self.checkpoint_path = checkpoint_path
        self.ckpt = load_checkpoint(checkpoint_path)
        self.against_path = against_path
        self.against = load_checkpoint(against_path) if against_path else None
        self.cfg = cfg
        self.settings = cfg.resolved["analysis"] if cfg else DEFAULTS["analysis"]
        self.folder = FolderBase("analysis", os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), "analysis"))
        self.config_hash = self.ckpt.meta.get("config_hash", "")

    def __repr__(self):
        return runez.short(self.checkpoint_path)

    @property
    def labeled(self):
        """list[(str, Checkpoint)]: Checkpoints to analyze, with their label"""
        result = [("checkpoint", self.ckpt)]
        if self.against is not None:
            result.append(("against", self.against))

        return result

    @runez.cached_property
    def analysis_samples(self):
        """list: Multimodal samples analyses run on, same for all analyzed checkpoints"""
        if self.cfg is None:
            raise ConfigError("This analysis needs --config, to locate the corpus analysis samples come from")

        corpus = Recipe(self.cfg).corpus
        return corpus.splits["eval_general_vqa"][: self.settings["sample_count"]]

    def require_comparable(self):
        """Activation analyses only compare checkpoints sharing the target LM shape"""
        if self.against is None:
            return

        a, b = self.ckpt.spec, self.against.spec
        if (a.target_lm, a.grid, a.vocab_size) != (b.target_lm, b.grid, b.vocab_size):
            raise CheckpointMismatchError(f"Can't compare {a} with {b}: target LM or grid differ")

    def require_same_spec(self):
        if self.against is not None and self.ckpt.spec != self.against.spec:
            raise CheckpointMismatchError(f"Can't compare {self.ckpt.spec} with {self.against.spec}: specs differ")

    def run(self, what):
        """
        Args:
            what (list[str]): Analyses to run
        """
        runez.ensure_folder(self.folder.path, logger=False)
        for name in what:
            getattr(self, f"analyze_{name}")()

    def activations(self, ckpt):
        return collect_hidden_states(ckpt.to_model(), self.analysis_samples)

    def analyze_gap(self):
        self.require_comparable()
        rows = []
        summary = {}
        for label, ckpt in self.labeled:
            summary[label] = {}
            for component, acts in sorted(self.activations(ckpt).items()):
                profile = per_layer_gap(acts)
                summary[label][component] = dict(mean=profile.mean, input=profile.per_layer_gap[0], output=profile.per_layer_gap[-1])
                for layer, gap in enumerate(profile.per_layer_gap):
                    rows.append(dict(checkpoint=label, variant=ckpt.spec.variant, component=component, layer=layer, gap=gap))

        write_table(self.folder.full_path("gap.csv"), "checkpoint,variant,component,layer,gap", rows, self.config_hash)
        write_json(self.folder.full_path("gap.json"), summary, self.config_hash)
        self.gap_curve()
        means = [f"{k}={v['target_lm']['mean']:.4f}" for k, v in summary.items()]
        inform(f"Mean target LM gap: {', '.join(means)}")

    def gap_curve(self):
        """Gap of the target LM across stage-2 snapshots found next to the checkpoint"""
        snapshots = FolderBase("snapshots", os.path.join(os.path.dirname(os.path.abspath(self.checkpoint_path)), "snapshots"))
        rows = []
        for path in snapshots.iterdir():
            if path.name.endswith(".ckpt"):
                snapshot = Checkpoint.load(str(path))
                profile = per_layer_gap(self.activations(snapshot)["target_lm"])
                rows.append(dict(step=snapshot.meta.get("step"), input_gap=profile.per_layer_gap[0], mean_gap=profile.mean))

        if rows:
            write_table(self.folder.full_path("gap_curve.csv"), "step,input_gap,mean_gap", rows, self.config_hash)

    def analyze_similarity(self):
        self.require_comparable()
        matrices = {}
        for label, ckpt in self.labeled:
            for component, acts in sorted(self.activations(ckpt).items()):
                for modality in ("visual", "text"):
                    sim = cross_layer_similarity(acts, modality)
                    matrices[(label, component, modality)] = sim
                    name = f"similarity-{label}-{component}-{modality}"
                    columns = ["layer"] + [f"l{j}" for j in range(len(sim.m))]
                    rows = [dict(layer=i, **{f"l{j}": float(v) for j, v in enumerate(row)}) for i, row in enumerate(sim.m)]
                    write_table(self.folder.full_path(f"{name}.csv"), columns, rows, self.config_hash)
                    title = f"{ckpt.spec.variant} {component} {modality}"
                    runez.write(self.folder.full_path(f"{name}.svg"), similarity_svg(sim.m, title, self.config_hash), logger=False)

        distances = {}
        for (label, component, modality), sim in sorted(matrices.items()):
            if modality == "visual":
                distances[f"{label}/{component}/visual-vs-text"] = sim.distance(matrices[(label, component, "text")])

            other = matrices.get(("against", component, modality))
            if label == "checkpoint" and other is not None and other.m.shape == sim.m.shape:
                distances[f"{component}/{modality}/checkpoint-vs-against"] = sim.distance(other)

        write_json(self.folder.full_path("similarity.json"), dict(distances=distances), self.config_hash)

    def adaptation_reference(self):
        """(str, Checkpoint): Weights the checkpoint is compared against (--against, else step-0 snapshot, else stage1.ckpt)"""
        if self.against is not None:
            return self.against_path, self.against

        folder = os.path.dirname(os.path.abspath(self.checkpoint_path))
        for candidate in (os.path.join(folder, "snapshots", "step000000.ckpt"), os.path.join(folder, "stage1.ckpt")):
            if os.path.exists(candidate):
                return candidate, Checkpoint.load(candidate)

        raise MissingPrerequisiteError(f"No reference weights for adaptation analysis next to {self}, use --against")

    def analyze_adaptation(self):
        path, reference = self.adaptation_reference()
        if reference.spec != self.ckpt.spec:
            raise CheckpointMismatchError(f"Can't compare {self.ckpt.spec} with {reference.spec}: specs differ")

        report = adaptation_report(reference, self.ckpt)
        write_table(self.folder.full_path("adaptation.csv"), "name,examined,intrusion", report.breakdown, self.config_hash)
        summary = dict(
            reference=reference.hash,
            checkpoint=self.ckpt.hash,
            update_density=report.update_density,
            intrusion_dimension=report.intrusion_dimension,
        )
        write_json(self.folder.full_path("adaptation.json"), summary, self.config_hash)
        inform(f"Adaptation vs {runez.short(path)}: {report}")

    def analyze_flops(self):
        s = self.settings
        report = count_flops(self.ckpt.spec, prompt_len=s["prompt_len"], gen_len=s["gen_len"], train_tokens=s["train_tokens"])
        rows = [dict(item=k, flops=v) for k, v in sorted(report.components.items())]
        rows.append(dict(item="prefill", flops=report.prefill))
        rows.append(dict(item="decode", flops=report.decode_total))
        rows.append(dict(item="decode_per_token", flops=report.decode_per_token))
        rows.append(dict(item="total", flops=report.total))
        rows.append(dict(item="training_step", flops=report.training))
        write_table(self.folder.full_path("flops.csv"), "item,flops", rows, self.config_hash)
        summary = dict(variant=report.spec.variant, params=report.params, prefill=report.prefill, total=report.total, ratios=report.ratios)
        write_json(self.folder.full_path("flops.json"), summary, self.config_hash)
        inform(f"FLOPs of {report}")

    def throughput(self):
        """Timings are informational only, they are never written to report files"""
        report = measure_throughput(self.ckpt.to_model(), self.analysis_samples, self.settings["gen_len"], repeats=self.settings["throughput_repeats"])
        inform(f"Throughput: {report} on {report.environment}")
        return report


def _run_values(run_dir):
    """(str, dict): Variant and stage-2 metrics of 'run_dir'"""
    rows = [r for r in load_metrics(run_dir) if r["stage"] == "stage2"]
    if not rows:
        raise MissingMetricsError(f"No stage2 metrics in {runez.short(run_dir)}")

    variants = {r["variant"] for r in rows}
    if len(variants) != 1:
        raise MissingMetricsError(f"{runez.short(run_dir)} mixes metrics of several variants: {', '.join(sorted(variants))}")

    metrics = {r["metric"]: float(r["value"]) for r in rows}
    values = {}
    for group in ("general_vqa", "counting", "text"):
        key = f"acc_{group}"
        if key not in metrics:
            raise MissingMetricsError(f"No '{key}' metric in {runez.short(run_dir)}")

        values[group] = metrics[key]

    values["multimodal_avg"] = sum(values[g] for g in MULTIMODAL_GROUPS) / len(MULTIMODAL_GROUPS)
    values["forgetting_delta"] = metrics.get("forgetting_delta", float("nan"))
    return variants.pop(), values


def _variant_order(variant):
    return (VARIANTS.index(variant) if variant in VARIANTS else len(VARIANTS), variant)


def compare_runs(run_dirs, baseline="baseline_vit", border="github"):
    """
    Pivot stage-2 metrics of several runs: one 'mean' and one 'std' row per variant (sample std, n - 1 denominator, 0 for a
    single seed), then one 'delta' row per variant (its mean minus the baseline's mean).

    Args:
        run_dirs (list[str]): Run folders, each with a metrics.csv
        baseline (str): Variant deltas are computed against
        border (str): Table border to use

    Returns:
        (TabularReport): Comparison table
    """
    per_variant = {}
    for run_dir in runez.flattened(run_dirs, unique=True):
        variant, values = _run_values(run_dir)
        per_variant.setdefault(variant, []).append(values)

    if baseline not in per_variant:
        raise MissingMetricsError(f"No run of baseline variant '{baseline}' among given run folders")

    means = {}
    report = TabularReport(["variant", "row", "seeds"] + COMPARED_COLUMNS, border=border)
    for variant in sorted(per_variant, key=_variant_order):
        runs = per_variant[variant]
        values = {c: np.array([r[c] for r in runs]) for c in COMPARED_COLUMNS}
        means[variant] = {c: float(v.mean()) for c, v in values.items()}
        stds = {c: float(v.std(ddof=1)) if len(v) > 1 else 0.0 for c, v in values.items()}
        report.add_row(variant=variant, row="mean", seeds=len(runs), **means[variant])
        report.add_row(variant=variant, row="std", seeds=len(runs), **stds)

    for variant in sorted(per_variant, key=_variant_order):
        deltas = {c: means[variant][c] - means[baseline][c] for c in COMPARED_COLUMNS}
        report.add_row(variant=variant, row="delta", seeds=len(per_variant[variant]), **deltas)

    return report


def sweep_correlations(points, groups=None):
    """
    Args:
        points (list[dict]): Per budget: {"budget": int, "perceiver": {group: score}, "final": {group: score}}
        groups (list[str] | None): Groups to correlate (default: all groups scored in first point)

    Returns:
        (dict): Group -> Pearson correlation between perceiver score and final score
    """
    if len(points) < 2:
        raise DegenerateInputError(f"Perceiver sweep needs at least 2 budgets, got {len(points)}")

    groups = groups or sorted(points[0]["perceiver"])
    return {g: pearson([p["perceiver"][g] for p in points], [p["final"][g] for p in points]) for g in groups}


def _average(scores):
    return sum(scores.values()) / len(scores) if scores else float("nan")


def sweep_perceivers(cfg):
    """
    Train one standalone perceiver per configured budget, a DPA model atop each, and correlate their scores.

    Args:
        cfg (prealign.RunConfig): Run configuration, its variant must be a DPA variant

    Returns:
        (dict): Group -> Pearson correlation
    """
    settings = cfg.resolved["sweep"]
    budgets = settings["budgets"]
    if len(budgets) < 2:
        raise DegenerateInputError(f"sweep.budgets: need at least 2 budgets to correlate, got {len(budgets)}")

    base = Recipe(cfg)
    if not base.spec.is_dpa:
        raise ConfigError(f"spec.variant: perceiver sweep needs a dpa variant, got '{base.spec.variant}'")

    base.ensure("stage0")
    sweep = FolderBase("sweep", base.root.full_path("sweep"))
    points = []
    for budget in budgets:
        recipe = Recipe(cfg, budget=budget, run_path=sweep.full_path(f"b{budget}", base.spec.variant, f"seed{base.seed}"))
        recipe.ensure("perceiver")
        perceiver = load_checkpoint(recipe.perceiver_path())
        recipe.ensure("stage1")
        recipe.run_stage2()
        final = {r["metric"][4:]: float(r["value"]) for r in recipe.metrics.rows() if r["stage"] == "stage2" and r["metric"].startswith("acc_")}
        points.append(dict(budget=budget, perceiver=perceiver.meta["scores"], final=final))

    baseline_average = None
    if settings["include_baseline"]:
        baseline = Recipe(cfg.with_variant("baseline_vit"), run_path=sweep.full_path("baseline", "baseline_vit", f"seed{base.seed}"))
        baseline.ensure("stage1")
        baseline.run_stage2()
        scores = {r["metric"][4:]: float(r["value"]) for r in baseline.metrics.rows() if r["stage"] == "stage2" and r["metric"].startswith("acc_")}
        baseline_average = _average(scores)

    correlations = sweep_correlations(points)
    for group in sorted(correlations):
        rows = [dict(budget=p["budget"], perceiver_score=p["perceiver"][group], final_score=p["final"][group]) for p in points]
        write_table(sweep.full_path(f"scatter-{group}.csv"), "budget,perceiver_score,final_score", rows, cfg.hash)

    rows = [dict(group=g, pearson=r, budgets=len(points)) for g, r in sorted(correlations.items())]
    write_table(sweep.full_path("correlation.csv"), "group,pearson,budgets", rows, cfg.hash)
    summary = dict(
        correlations=correlations,
        baseline_average=baseline_average,
        final_averages={str(p["budget"]): _average(p["final"]) for p in points},
    )
    write_json(sweep.full_path("correlation.json"), summary, cfg.hash)
    return correlations
