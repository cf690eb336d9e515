"""Seeded comparison of aggregation variants under a shared parameter budget."""

import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

import torch
from jinja2 import Environment, PackageLoader, select_autoescape
from pydantic import BaseModel

from ufc_matcher.core.config import (
    CrossAttentionKind,
    ModelOptions,
    SelfAttentionKind,
    Settings,
    VariantTag,
    get_settings,
)
from ufc_matcher.core.exceptions import ConfigurationError, UsageError
from ufc_matcher.core.numerics import parameter_count
from ufc_matcher.models.records import AblationRow, AblationRun, DirectionCheck
from ufc_matcher.services.evaluation import aepe
from ufc_matcher.services.flow_io import write_records
from ufc_matcher.services.pyramid import UFCMatcher
from ufc_matcher.services.synthetic import SyntheticDatasetService
from ufc_matcher.services.training import TrainingPair, TrainingService, load_model, load_pairs, split_pairs
from ufc_matcher.services.zoom import ZoomInService

logger = logging.getLogger(__name__)

REFERENCE_VARIANT = VariantTag.HIERARCHY
MAX_FFN_HIDDEN = 1 << 20
REPORT_TEMPLATE = "ablation_report.md.j2"

VARIANT_OPTIONS: dict[VariantTag, dict[str, Any]] = {
    VariantTag.FEAT_SELF: {
        "self_attention": SelfAttentionKind.FEATURE,
        "cross_attention": CrossAttentionKind.NONE,
        "hierarchical": False,
    },
    VariantTag.FEAT_SELF_CROSS: {
        "self_attention": SelfAttentionKind.FEATURE,
        "cross_attention": CrossAttentionKind.FEATURE,
        "hierarchical": False,
    },
    VariantTag.COST_SELF: {
        "self_attention": SelfAttentionKind.COST,
        "cross_attention": CrossAttentionKind.NONE,
        "hierarchical": False,
    },
    VariantTag.SEQUENTIAL: {
        "self_attention": SelfAttentionKind.SEQUENTIAL,
        "cross_attention": CrossAttentionKind.FEATURE,
        "hierarchical": False,
    },
    VariantTag.INTEGRATIVE: {
        "self_attention": SelfAttentionKind.INTEGRATIVE,
        "cross_attention": CrossAttentionKind.FEATURE,
        "hierarchical": False,
    },
    VariantTag.MATCHING_DIST: {
        "self_attention": SelfAttentionKind.INTEGRATIVE,
        "cross_attention": CrossAttentionKind.MATCHING,
        "hierarchical": False,
    },
    VariantTag.HIERARCHY: {
        "self_attention": SelfAttentionKind.INTEGRATIVE,
        "cross_attention": CrossAttentionKind.MATCHING,
        "hierarchical": True,
    },
}

# (name, expected better, expected worse)
DIRECTIONS: list[tuple[str, VariantTag, VariantTag]] = [
    ("integrative beats sequential aggregation", VariantTag.INTEGRATIVE, VariantTag.SEQUENTIAL),
    ("hierarchical processing helps", VariantTag.HIERARCHY, VariantTag.MATCHING_DIST),
    ("full model beats feature self-attention", VariantTag.HIERARCHY, VariantTag.FEAT_SELF),
    ("zoom-in refines the hierarchical model", VariantTag.ZOOM, VariantTag.HIERARCHY),
]


class AblationReport(BaseModel):
    runs: list[AblationRun]
    rows: list[AblationRow]
    checks: list[DirectionCheck]
    seeds: list[int]
    reference_parameters: int
    markdown_path: Path
    records_path: Path


def count_parameters(options: ModelOptions) -> int:
    """Learnable parameter count of a model, built on the meta device."""
    with torch.device("meta"):
        return parameter_count(UFCMatcher(options))


def _model_variant(tag: VariantTag) -> VariantTag:
    # +zoom evaluates the hierarchical model with zoom-in
    return REFERENCE_VARIANT if tag == VariantTag.ZOOM else tag


def match_budget(options: ModelOptions, target: int) -> ModelOptions:
    """Smallest feed-forward width whose parameter count is closest to ``target``."""
    low, high = 1, MAX_FFN_HIDDEN
    while low < high:
        mid = (low + high) // 2
        if count_parameters(options.model_copy(update={"ffn_hidden": mid})) < target:
            low = mid + 1
        else:
            high = mid
    candidates = [options.model_copy(update={"ffn_hidden": h}) for h in {max(1, low - 1), low}]
    return min(candidates, key=lambda o: (abs(count_parameters(o) - target), o.ffn_hidden))


class AblationService:
    """Trains every variant on the same data and seeds and writes the comparison."""

    def __init__(self, settings: Settings | None = None) -> None:
        self.settings = settings or get_settings()
        self._env = Environment(
            loader=PackageLoader("ufc_matcher", "templates"),
            autoescape=select_autoescape(default=False),
            trim_blocks=True,
            lstrip_blocks=True,
        )

    def variant_options(self, tags: list[VariantTag]) -> tuple[dict[VariantTag, ModelOptions], int]:
        """Budget-matched options per model variant plus the reference parameter count."""
        reference = self.settings.model_options(**VARIANT_OPTIONS[REFERENCE_VARIANT])
        target = count_parameters(reference)
        tolerance = self.settings.ablation_budget_tolerance
        options: dict[VariantTag, ModelOptions] = {}
        for tag in dict.fromkeys(_model_variant(t) for t in tags):
            variant = self.settings.model_options(**VARIANT_OPTIONS[tag])
            if tag != REFERENCE_VARIANT:
                variant = match_budget(variant, target)
            count = count_parameters(variant)
            ratio = count / target
            if abs(ratio - 1.0) > tolerance:
                raise ConfigurationError(
                    f"Variant '{tag.value}' has {count} parameters, {ratio:.2f}x the {target} of "
                    f"'{REFERENCE_VARIANT.value}' (tolerance {tolerance:.0%})"
                )
            logger.info(f"Variant {tag.value}: {count} parameters (ratio {ratio:.3f}, ffn_hidden {variant.ffn_hidden})")
            options[tag] = variant
        return options, target

    def _train(
        self, tag: VariantTag, seed: int, options: ModelOptions, pairs: list[TrainingPair], out_dir: Path
    ) -> tuple[Path, float]:
        settings = self.settings.model_copy(update={"seed": seed})
        checkpoint = out_dir / tag.value / f"seed{seed}" / "checkpoint.pt"
        result = TrainingService(settings).train(
            options=options, checkpoint_path=checkpoint, epochs=self.settings.ablation_epochs, pairs=pairs
        )
        logger.info(f"Variant {tag.value} seed {seed}: best val AEPE {result.best_val_aepe:.4f}")
        return checkpoint, result.best_val_aepe

    def _zoom_aepe(self, checkpoint: Path, pairs: list[TrainingPair]) -> float:
        service = ZoomInService(load_model(checkpoint), self.settings)
        scores = [aepe(service.zoom_in(p.source, p.target).flow, p.flow) for p in pairs]
        return sum(scores) / len(scores)

    def _run_seed(
        self,
        seed: int,
        tags: list[VariantTag],
        options: dict[VariantTag, ModelOptions],
        pairs: list[TrainingPair],
        out_dir: Path,
    ) -> list[AblationRun]:
        _, val_pairs = split_pairs(pairs, self.settings.val_fraction)
        trained: dict[VariantTag, tuple[Path, float]] = {}
        runs = []
        for tag in tags:
            model_tag = _model_variant(tag)
            if model_tag not in trained:
                trained[model_tag] = self._train(model_tag, seed, options[model_tag], pairs, out_dir)
            checkpoint, best_aepe = trained[model_tag]
            score = self._zoom_aepe(checkpoint, val_pairs) if tag == VariantTag.ZOOM else best_aepe
            runs.append(
                AblationRun(variant=tag, seed=seed, parameters=count_parameters(options[model_tag]), val_aepe=score)
            )
        return runs

    @staticmethod
    def summarize(runs: list[AblationRun], tags: list[VariantTag], reference: int) -> list[AblationRow]:
        rows = []
        for tag in tags:
            mine = [r for r in runs if r.variant == tag]
            if not mine:
                continue
            rows.append(
                AblationRow(
                    variant=tag,
                    parameters=mine[0].parameters,
                    budget_ratio=mine[0].parameters / reference,
                    median_aepe=statistics.median(r.val_aepe for r in mine),
                    seed_aepe=[r.val_aepe for r in sorted(mine, key=lambda r: r.seed)],
                )
            )
        return rows

    @staticmethod
    def check_directions(rows: list[AblationRow]) -> list[DirectionCheck]:
        """Soft expectations on median AEPE; a missing variant leaves the check undecided."""
        by_tag = {row.variant: row for row in rows}
        checks = []
        for name, better, worse in DIRECTIONS:
            passed = None
            if better in by_tag and worse in by_tag:
                passed = by_tag[better].median_aepe < by_tag[worse].median_aepe
            checks.append(DirectionCheck(name=name, better=better, worse=worse, passed=passed))
        return checks

    def render(self, rows: list[AblationRow], checks: list[DirectionCheck], seeds: list[int], reference: int) -> str:
        template = self._env.get_template(REPORT_TEMPLATE)
        return template.render(
            rows=rows, checks=checks, seeds=seeds, reference=reference, reference_variant=REFERENCE_VARIANT.value
        )

    def run(
        self,
        data_dir: Path | None = None,
        out_dir: Path | None = None,
        variants: list[VariantTag] | None = None,
        pairs: list[TrainingPair] | None = None,
    ) -> AblationReport:
        settings = self.settings
        tags = list(dict.fromkeys(variants or settings.ablation_variants))
        if not tags:
            raise UsageError("No ablation variants selected")
        data_dir = Path(data_dir or settings.data_dir)
        out_dir = Path(out_dir or settings.output_dir / "ablation")
        if pairs is None:
            pairs = load_pairs(data_dir, SyntheticDatasetService.load(data_dir))

        options, reference = self.variant_options(tags)
        seeds = list(settings.ablation_seeds)
        with ThreadPoolExecutor(max_workers=settings.threads) as pool:
            per_seed = list(pool.map(lambda s: self._run_seed(s, tags, options, pairs, out_dir), seeds))
        runs = [run for seed_runs in per_seed for run in seed_runs]

        rows = self.summarize(runs, tags, reference)
        checks = self.check_directions(rows)
        for check in checks:
            verdict = "n/a" if check.passed is None else ("PASS" if check.passed else "FAIL")
            logger.info(f"Direction '{check.name}': {verdict}")

        out_dir.mkdir(parents=True, exist_ok=True)
        markdown_path = out_dir / "ablation.md"
        markdown_path.write_text(self.render(rows, checks, seeds, reference))
        records_path = write_records([*runs, *rows, *checks], out_dir / "ablation.jsonl")
        return AblationReport(
            runs=runs,
            rows=rows,
            checks=checks,
            seeds=seeds,
            reference_parameters=reference,
            markdown_path=markdown_path,
            records_path=records_path,
        )
