"""Benchmark harness: dataset ingestion, CLIP-style scoring, two-prompt aggregation.

Each test item pairs a source image and instruction with a gold edited
image and gold captions. Edited outputs are scored by cosine similarity
against the gold caption (CLIP-T) and gold image (CLIP-I); every knob
setting is run under both prompt styles and aggregated into avg/stdev
pairs across the two runs.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from PIL import Image

from .backends.base import BackendSuite
from .pipeline import EditConfig, EditRequest, PipelineError, edit
from .prompting import FewShotExample

EXPECTED_TEST_TRIPLES = 1053

# Published scores of prior instruction-editing systems, embedded for report
# comparison only; the harness never recomputes them.
REFERENCE_BASELINES = {
    "InstructPix2Pix": {"clip_t": 0.2764, "clip_i": 0.8524},
    "HIVE": {"clip_t": 0.2752, "clip_i": 0.8519},
}

STDEV_CONVENTION = "population (divisor = number of prompt runs, i.e. 2)"


class DatasetError(ValueError):
    """Itemized problems found while loading an evaluation split."""


class ScoreError(ValueError):
    """Degenerate embeddings that cannot be scored."""


class Scorer(Protocol):
    """Shared image/text embedding space for evaluation; separate from generation."""

    def embed_image(self, image: Image.Image) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class EvalTriple:
    """One benchmark item: source image, instruction, and gold targets."""

    id: str
    source_image: Path
    instruction: str
    gold_caption: str
    gold_image: Path
    source_gold_caption: str

    def load_source_image(self) -> Image.Image:
        return Image.open(self.source_image).convert("RGB")

    def load_gold_image(self) -> Image.Image:
        return Image.open(self.gold_image).convert("RGB")


@dataclass(frozen=True)
class ItemRow:
    triple_id: str
    fingerprint: str
    prompt_style: str
    clip_t: Optional[float]
    clip_i: Optional[float]
    error: Optional[str] = None


@dataclass(frozen=True)
class AggregateRow:
    knobs: str  # style-independent fingerprint
    clip_t_avg: float
    clip_t_stdev: float
    clip_i_avg: float
    clip_i_stdev: float
    items_scored: int
    failures: int


@dataclass
class EvalReport:
    rows: list[ItemRow]
    aggregates: list[AggregateRow]
    metadata: dict = field(default_factory=dict)


_REQUIRED_FIELDS = (
    "id",
    "source_image",
    "instruction",
    "gold_caption",
    "gold_image",
    "source_gold_caption",
)


def load_dataset(root: str | Path, split: str) -> list[EvalTriple]:
    """Load a split from ``root/<split>/metadata.jsonl``.

    Image paths in the records are relative to the split directory. A
    missing split yields an empty list with a warning; malformed records,
    missing files and undecodable images raise one itemized error. The
    test split is expected to hold the full set of held-out triples;
    smaller subsets only warn, so partial runs stay legal.
    """
    if split not in ("dev", "test"):
        raise DatasetError(f"split must be 'dev' or 'test', got {split!r}")
    split_dir = Path(root) / split
    metadata = split_dir / "metadata.jsonl"
    if not metadata.exists():
        warnings.warn(f"no metadata at {metadata}; returning an empty {split} split")
        return []

    triples: list[EvalTriple] = []
    problems: list[str] = []
    for lineno, line in enumerate(metadata.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"line {lineno}: invalid JSON ({exc})")
            continue
        missing = [key for key in _REQUIRED_FIELDS if not record.get(key)]
        if missing:
            problems.append(f"line {lineno}: missing fields {missing}")
            continue
        source = split_dir / record["source_image"]
        gold = split_dir / record["gold_image"]
        ok = True
        for label, path in (("source_image", source), ("gold_image", gold)):
            if not path.exists():
                problems.append(f"line {lineno}: {label} {path} does not exist")
                ok = False
                continue
            try:
                with Image.open(path) as img:
                    img.verify()
            except Exception as exc:
                problems.append(f"line {lineno}: {label} {path} undecodable ({exc})")
                ok = False
        if not ok:
            continue
        triples.append(
            EvalTriple(
                id=str(record["id"]),
                source_image=source,
                instruction=record["instruction"],
                gold_caption=record["gold_caption"],
                gold_image=gold,
                source_gold_caption=record["source_gold_caption"],
            )
        )
    if problems:
        raise DatasetError(f"{metadata}: " + "; ".join(problems))
    if split == "test" and len(triples) != EXPECTED_TEST_TRIPLES:
        warnings.warn(
            f"test split holds {len(triples)} triples, expected {EXPECTED_TEST_TRIPLES}; "
            "treating as a subset run"
        )
    return triples


def _unit(vector: np.ndarray, label: str) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64).ravel()
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0.0:
        raise ScoreError(f"{label} embedding has zero or non-finite norm")
    return v / norm


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(_unit(u, "left"), _unit(v, "right")))


def score_item(
    edited_image: Image.Image, triple: EvalTriple, scorer: Scorer
) -> tuple[float, float]:
    """(CLIP-T, CLIP-I): similarity of the edit to the gold caption and gold image."""
    edited = _unit(scorer.embed_image(edited_image), "edited image")
    gold_image = _unit(scorer.embed_image(triple.load_gold_image()), "gold image")
    gold_text = _unit(scorer.embed_text(triple.gold_caption), "gold caption")
    clip_t = float(np.dot(edited, gold_text))
    clip_i = float(np.dot(edited, gold_image))
    return clip_t, clip_i


def two_prompt_aggregate(means: Sequence[float]) -> tuple[float, float]:
    """Average and population standard deviation across the prompt-style runs."""
    if len(means) != 2:
        raise ScoreError(f"aggregation expects exactly two prompt runs, got {len(means)}")
    avg = sum(means) / 2.0
    stdev = math.sqrt(sum((m - avg) ** 2 for m in means) / 2.0)
    return avg, stdev


def pair_configs(configs: Sequence[EditConfig]) -> list[tuple[str, dict[str, EditConfig]]]:
    """Group configs into terse/detailed pairs keyed by the style-free fingerprint."""
    groups: dict[str, dict[str, EditConfig]] = {}
    order: list[str] = []
    for config in configs:
        key = config.fingerprint(include_style=False)
        if key not in groups:
            groups[key] = {}
            order.append(key)
        if config.prompt_style in groups[key]:
            raise ScoreError(f"duplicate prompt style {config.prompt_style!r} for knobs {key}")
        groups[key][config.prompt_style] = config
    for key in order:
        if set(groups[key]) != {"terse", "detailed"}:
            raise ScoreError(f"knobs {key} must come as a terse/detailed pair")
    return [(key, groups[key]) for key in order]


def _per_item_config(config: EditConfig, triple: EvalTriple) -> EditConfig:
    # oracle rows leave user_caption unset; each item supplies its own gold source caption
    if config.lock_in_mode == "user_caption" and config.user_caption is None:
        return dataclasses.replace(config, user_caption=triple.source_gold_caption)
    return config


def run_grid(
    dataset: Sequence[EvalTriple],
    configs: Sequence[EditConfig],
    suite: BackendSuite,
    scorer: Scorer,
    pool: Sequence[FewShotExample] = (),
    precomputed: Optional[dict[tuple[str, str], ItemRow]] = None,
    row_sink: Optional[Callable[[ItemRow], None]] = None,
) -> EvalReport:
    """Edit and score every (item, config); aggregate across prompt styles.

    ``precomputed`` short-circuits rows from a previous partial run keyed
    by (fingerprint, triple id); ``row_sink`` observes each fresh row,
    which is how the CLI checkpoints long runs. Failed items keep their
    stage label and are excluded from means but counted.
    """
    pairs = pair_configs(configs)
    rows: list[ItemRow] = []
    by_config: dict[str, list[ItemRow]] = {}
    for _, styles in pairs:
        for style in ("terse", "detailed"):
            config = styles[style]
            fingerprint = config.fingerprint()
            config_rows: list[ItemRow] = []
            for triple in dataset:
                key = (fingerprint, triple.id)
                if precomputed is not None and key in precomputed:
                    row = precomputed[key]
                else:
                    row = _run_item(triple, config, suite, scorer, pool)
                    if row_sink is not None:
                        row_sink(row)
                config_rows.append(row)
            rows.extend(config_rows)
            by_config[fingerprint] = config_rows

    aggregates: list[AggregateRow] = []
    for knobs, styles in pairs:
        style_means: dict[str, tuple[float, float]] = {}
        scored = 0
        failures = 0
        for style in ("terse", "detailed"):
            config_rows = by_config[styles[style].fingerprint()]
            ok = [row for row in config_rows if row.error is None]
            failures += len(config_rows) - len(ok)
            scored += len(ok)
            if ok:
                # fsum keeps the mean bit-identical under item reordering
                style_means[style] = (
                    math.fsum(row.clip_t for row in ok) / len(ok),
                    math.fsum(row.clip_i for row in ok) / len(ok),
                )
        if len(style_means) == 2:
            t_avg, t_stdev = two_prompt_aggregate([style_means[s][0] for s in ("terse", "detailed")])
            i_avg, i_stdev = two_prompt_aggregate([style_means[s][1] for s in ("terse", "detailed")])
        else:
            t_avg = t_stdev = i_avg = i_stdev = float("nan")
        aggregates.append(
            AggregateRow(
                knobs=knobs,
                clip_t_avg=t_avg,
                clip_t_stdev=t_stdev,
                clip_i_avg=i_avg,
                clip_i_stdev=i_stdev,
                items_scored=scored,
                failures=failures,
            )
        )

    metadata = {
        "stdev_convention": STDEV_CONVENTION,
        "scoring": "cosine similarity of unit-normalized embeddings; higher is better",
        "preprocessing": "evaluation embedder's own standard image preprocessing",
        "items": len(dataset),
        "configs": len(configs),
        "baselines": REFERENCE_BASELINES,
        "backends": dict(suite.identifiers),
    }
    return EvalReport(rows=rows, aggregates=aggregates, metadata=metadata)


def _run_item(
    triple: EvalTriple,
    config: EditConfig,
    suite: BackendSuite,
    scorer: Scorer,
    pool: Sequence[FewShotExample],
) -> ItemRow:
    fingerprint = config.fingerprint()
    try:
        request = EditRequest(
            image=triple.load_source_image(),
            instruction=triple.instruction,
            knobs=_per_item_config(config, triple),
        )
        result = edit(request, suite, pool)
        clip_t, clip_i = score_item(result.edited_image, triple, scorer)
        return ItemRow(triple.id, fingerprint, config.prompt_style, clip_t, clip_i)
    except PipelineError as exc:
        return ItemRow(triple.id, fingerprint, config.prompt_style, None, None, str(exc))
    except Exception as exc:  # scoring or loading failures
        return ItemRow(triple.id, fingerprint, config.prompt_style, None, None, f"[scoring] {exc}")


def table_grid(rng_seed: int = 0, ddim_steps: int = 100) -> list[EditConfig]:
    """The full knob grid: 12 knob rows, each under both prompt styles.

    Rows per shot count: one caption without lock-in, then one, two and
    four captions with the generated caption locked in.
    """
    configs: list[EditConfig] = []
    for shots in (0, 1, 3):
        for n_captions, lock in ((1, "none"), (1, "generated_caption"), (2, "generated_caption"), (4, "generated_caption")):
            for style in ("terse", "detailed"):
                configs.append(
                    EditConfig(
                        n_captions=n_captions,
                        shots=shots,
                        prompt_style=style,
                        lock_in_mode=lock,
                        ddim_steps=ddim_steps,
                        rng_seed=rng_seed,
                    )
                )
    return configs


def oracle_pair(rng_seed: int = 0, ddim_steps: int = 100) -> list[EditConfig]:
    """The gold-source-caption variant of the strongest knob row."""
    return [
        EditConfig(
            n_captions=1,
            shots=1,
            prompt_style=style,
            lock_in_mode="user_caption",
            ddim_steps=ddim_steps,
            rng_seed=rng_seed,
        )
        for style in ("terse", "detailed")
    ]


def write_report(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    """Emit the aggregate table (TSV), per-item rows (JSONL) and metadata (JSON)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aggregate_path = out / "aggregates.tsv"
    items_path = out / "items.jsonl"
    metadata_path = out / "metadata.json"

    header = "knobs\tclip_t_avg\tclip_t_stdev\tclip_i_avg\tclip_i_stdev\titems_scored\tfailures"
    lines = [header]
    for row in report.aggregates:
        lines.append(
            f"{row.knobs}\t{row.clip_t_avg:.6f}\t{row.clip_t_stdev:.6f}"
            f"\t{row.clip_i_avg:.6f}\t{row.clip_i_stdev:.6f}\t{row.items_scored}\t{row.failures}"
        )
    aggregate_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    with items_path.open("w", encoding="utf-8") as fh:
        for row in report.rows:
            fh.write(json.dumps(dataclasses.asdict(row)) + "\n")

    metadata_path.write_text(json.dumps(report.metadata, indent=2) + "\n", encoding="utf-8")
    return {"aggregates": aggregate_path, "items": items_path, "metadata": metadata_path}


class ClipScorer:
    """Image-text embedding model for scoring; lazily imports its dependencies.

    The model identifier comes from configuration (``eval_model``), never
    from code.
    """

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch  # noqa: F401
            import transformers
        except ImportError as exc:
            raise ScoreError(f"scorer needs torch and transformers installed: {exc}") from exc
        try:
            self.model = transformers.CLIPModel.from_pretrained(model_id).to(device)
            self.model.eval()
            self.processor = transformers.CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise ScoreError(f"cannot load scorer {model_id}: {exc}") from exc
        self.device = device
        self.model_id = model_id

    def embed_image(self, image: Image.Image) -> np.ndarray:
        import torch

        with torch.no_grad():
            inputs = self.processor(images=image.convert("RGB"), return_tensors="pt").to(self.device)
            features = self.model.get_image_features(**inputs)
        return features[0].float().cpu().numpy()

    def embed_text(self, text: str) -> np.ndarray:
        import torch

        with torch.no_grad():
            inputs = self.processor(text=[text], return_tensors="pt", padding=True, truncation=True).to(
                self.device
            )
            features = self.model.get_text_features(**inputs)
        return features[0].float().cpu().numpy()
