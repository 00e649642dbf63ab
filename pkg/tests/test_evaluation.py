import json

import numpy as np
import pytest
from PIL import Image

from instructedit.backends import make_fake_suite, stable_seed
from instructedit.evaluation import (
    DatasetError,
    EvalTriple,
    REFERENCE_BASELINES,
    ScoreError,
    cosine_similarity,
    load_dataset,
    oracle_pair,
    pair_configs,
    run_grid,
    score_item,
    table_grid,
    two_prompt_aggregate,
    write_report,
)
from instructedit.pipeline import EditConfig
from instructedit.prompting import FewShotExample


def make_image(seed=0, size=24):
    rng = np.random.default_rng(seed)
    return Image.fromarray(rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8), "RGB")


def build_dataset(root, split="test", count=3):
    split_dir = root / split
    (split_dir / "images").mkdir(parents=True)
    records = []
    for i in range(count):
        source = f"images/src_{i}.png"
        gold = f"images/gold_{i}.png"
        make_image(seed=i).save(split_dir / source)
        make_image(seed=100 + i).save(split_dir / gold)
        records.append(
            {
                "id": f"item-{i}",
                "source_image": source,
                "instruction": f"recolor object {i}",
                "gold_caption": f"a recolored object {i}",
                "gold_image": gold,
                "source_gold_caption": f"an object {i}",
            }
        )
    (split_dir / "metadata.jsonl").write_text(
        "\n".join(json.dumps(r) for r in records), encoding="utf-8"
    )
    return records


class HashScorer:
    """Deterministic stand-in embedder keyed on exact pixel/text content."""

    def embed_image(self, image):
        rng = np.random.default_rng(stable_seed("scorer-image", image.size, image.tobytes()))
        return rng.normal(size=16)

    def embed_text(self, text):
        rng = np.random.default_rng(stable_seed("scorer-text", text))
        return rng.normal(size=16)


class VectorScorer:
    """Maps known inputs to hand-picked vectors."""

    def __init__(self, image_vectors, text_vectors):
        self.image_vectors = image_vectors
        self.text_vectors = text_vectors

    def embed_image(self, image):
        return np.array(self.image_vectors[image.tobytes()], dtype=float)

    def embed_text(self, text):
        return np.array(self.text_vectors[text], dtype=float)


def make_pool():
    return [
        FewShotExample(
            transformation=f"redraw scene {i}",
            before_captions=tuple(f"scene {i} take {j}" for j in range(4)),
            after_captions=tuple(f"redrawn scene {i} take {j}" for j in range(4)),
        )
        for i in range(4)
    ]


class TestLoadDataset:
    def test_missing_split_warns_and_returns_empty(self, tmp_path):
        with pytest.warns(UserWarning, match="empty"):
            assert load_dataset(tmp_path, "test") == []

    def test_single_record(self, tmp_path):
        build_dataset(tmp_path, "dev", count=1)
        (triple,) = load_dataset(tmp_path, "dev")
        assert triple.id == "item-0"
        assert triple.load_source_image().size == (24, 24)
        assert triple.source_gold_caption == "an object 0"

    def test_subset_test_split_warns_about_cardinality(self, tmp_path):
        build_dataset(tmp_path, "test", count=2)
        with pytest.warns(UserWarning, match="1053"):
            triples = load_dataset(tmp_path, "test")
        assert len(triples) == 2

    def test_missing_image_itemized(self, tmp_path):
        build_dataset(tmp_path, "dev", count=2)
        (tmp_path / "dev" / "images" / "src_1.png").unlink()
        with pytest.raises(DatasetError, match="src_1.png"):
            load_dataset(tmp_path, "dev")

    def test_undecodable_image_itemized(self, tmp_path):
        build_dataset(tmp_path, "dev", count=1)
        (tmp_path / "dev" / "images" / "gold_0.png").write_bytes(b"not a png")
        with pytest.raises(DatasetError, match="undecodable"):
            load_dataset(tmp_path, "dev")

    def test_malformed_record_itemized(self, tmp_path):
        build_dataset(tmp_path, "dev", count=1)
        meta = tmp_path / "dev" / "metadata.jsonl"
        meta.write_text(meta.read_text() + '\n{"id": "broken"}', encoding="utf-8")
        with pytest.raises(DatasetError, match="missing fields"):
            load_dataset(tmp_path, "dev")

    def test_unknown_split_rejected(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path, "train")


class TestScoreItem:
    def make_triple(self, tmp_path, gold_image):
        gold_path = tmp_path / "gold.png"
        gold_image.save(gold_path)
        source_path = tmp_path / "src.png"
        make_image(seed=5).save(source_path)
        return EvalTriple(
            id="t",
            source_image=source_path,
            instruction="change it",
            gold_caption="a changed thing",
            gold_image=gold_path,
            source_gold_caption="a thing",
        )

    def test_self_similarity_is_one(self, tmp_path):
        gold = make_image(seed=9)
        triple = self.make_triple(tmp_path, gold)
        clip_t, clip_i = score_item(gold, triple, HashScorer())
        assert abs(clip_i - 1.0) <= 1e-6
        assert -1.0 <= clip_t <= 1.0

    def test_hand_vector_oracle(self, tmp_path):
        gold = make_image(seed=9)
        edited = make_image(seed=10)
        triple = self.make_triple(tmp_path, gold)
        scorer = VectorScorer(
            image_vectors={edited.tobytes(): (1.0, 0.0), gold.tobytes(): (0.0, 1.0)},
            text_vectors={"a changed thing": (1.0, 0.0)},
        )
        clip_t, clip_i = score_item(edited, triple, scorer)
        assert clip_i == pytest.approx(0.0, abs=1e-12)
        assert clip_t == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_vectors_score_zero(self):
        assert cosine_similarity(np.array([2.0, 0.0]), np.array([0.0, 5.0])) == 0.0

    def test_zero_norm_rejected(self):
        with pytest.raises(ScoreError):
            cosine_similarity(np.zeros(3), np.ones(3))


class TestAggregation:
    def test_hand_case(self):
        avg, stdev = two_prompt_aggregate([0.27, 0.29])
        assert avg == pytest.approx(0.28, abs=1e-12)
        assert stdev == pytest.approx(0.01, abs=1e-12)

    def test_identical_means(self):
        avg, stdev = two_prompt_aggregate([0.5, 0.5])
        assert avg == 0.5
        assert stdev == 0.0

    def test_requires_exactly_two(self):
        with pytest.raises(ScoreError):
            two_prompt_aggregate([0.1])

    def test_pair_configs_requires_both_styles(self):
        with pytest.raises(ScoreError, match="pair"):
            pair_configs([EditConfig(prompt_style="terse")])

    def test_pair_configs_rejects_duplicates(self):
        with pytest.raises(ScoreError, match="duplicate"):
            pair_configs([EditConfig(prompt_style="terse"), EditConfig(prompt_style="terse")])


def style_pair(**kwargs):
    return [EditConfig(prompt_style=style, **kwargs) for style in ("terse", "detailed")]


class TestRunGrid:
    def test_deterministic_report(self, tmp_path):
        build_dataset(tmp_path, "test", count=10)
        with pytest.warns(UserWarning):
            dataset = load_dataset(tmp_path, "test")
        configs = style_pair(ddim_steps=3)
        first = run_grid(dataset, configs, make_fake_suite(8, 8, 16), HashScorer(), make_pool())
        second = run_grid(dataset, configs, make_fake_suite(8, 8, 16), HashScorer(), make_pool())
        assert first.rows == second.rows
        assert first.aggregates == second.aggregates

    def test_permutation_invariant_aggregates(self, tmp_path):
        build_dataset(tmp_path, "dev", count=6)
        dataset = load_dataset(tmp_path, "dev")
        configs = style_pair(ddim_steps=3)
        suite = lambda: make_fake_suite(8, 8, 16)  # noqa: E731
        fwd = run_grid(dataset, configs, suite(), HashScorer(), make_pool())
        rev = run_grid(list(reversed(dataset)), configs, suite(), HashScorer(), make_pool())
        assert fwd.aggregates == rev.aggregates

    def test_failures_excluded_and_counted(self, tmp_path):
        build_dataset(tmp_path, "dev", count=3)
        dataset = load_dataset(tmp_path, "dev")
        suite = make_fake_suite(8, 8, 16)

        class BrokenCaptioner:
            def caption(self, image):
                raise RuntimeError("nope")

        suite.captioner = BrokenCaptioner()
        report = run_grid(dataset, style_pair(ddim_steps=3), suite, HashScorer(), make_pool())
        assert all(row.error is not None and "captioning" in row.error for row in report.rows)
        (aggregate,) = report.aggregates
        assert aggregate.failures == 6
        assert aggregate.items_scored == 0
        assert np.isnan(aggregate.clip_t_avg)

    def test_oracle_rows_fill_user_caption_and_skip_captioner(self, tmp_path):
        build_dataset(tmp_path, "dev", count=3)
        dataset = load_dataset(tmp_path, "dev")
        suite = make_fake_suite(8, 8, 16)
        report = run_grid(dataset, oracle_pair(ddim_steps=3), suite, HashScorer(), make_pool())
        assert suite.captioner.calls == 0
        assert all(row.error is None for row in report.rows)

    def test_resume_via_precomputed_rows(self, tmp_path):
        build_dataset(tmp_path, "dev", count=4)
        dataset = load_dataset(tmp_path, "dev")
        configs = style_pair(ddim_steps=3)
        seen = []
        base = run_grid(
            dataset, configs, make_fake_suite(8, 8, 16), HashScorer(), make_pool(),
            row_sink=seen.append,
        )
        assert len(seen) == len(base.rows)
        precomputed = {(row.fingerprint, row.triple_id): row for row in seen}
        fresh = []
        resumed = run_grid(
            dataset, configs, make_fake_suite(8, 8, 16), HashScorer(), make_pool(),
            precomputed=precomputed, row_sink=fresh.append,
        )
        assert fresh == []
        assert resumed.rows == base.rows
        assert resumed.aggregates == base.aggregates

    def test_metadata_carries_conventions_and_baselines(self, tmp_path):
        build_dataset(tmp_path, "dev", count=2)
        dataset = load_dataset(tmp_path, "dev")
        report = run_grid(
            dataset, style_pair(ddim_steps=3), make_fake_suite(8, 8, 16), HashScorer(), make_pool()
        )
        assert "population" in report.metadata["stdev_convention"]
        assert report.metadata["baselines"] == REFERENCE_BASELINES


@pytest.mark.skipif(
    "INSTRUCTEDIT_DATASET" not in __import__("os").environ,
    reason="set INSTRUCTEDIT_DATASET to the official benchmark root",
)
class TestOfficialSplit:
    def test_full_test_split_has_expected_cardinality(self):
        import os
        import warnings as warnings_module

        with warnings_module.catch_warnings():
            warnings_module.simplefilter("error")  # full split must load without the subset warning
            triples = load_dataset(os.environ["INSTRUCTEDIT_DATASET"], "test")
        assert len(triples) == 1053


class TestGrids:
    def test_table_grid_shape(self):
        configs = table_grid()
        assert len(configs) == 24
        pairs = pair_configs(configs)
        assert len(pairs) == 12
        locks = [styles["terse"].lock_in_mode for _, styles in pairs]
        assert locks.count("none") == 3
        assert locks.count("generated_caption") == 9

    def test_oracle_pair_uses_user_caption_mode(self):
        pair = oracle_pair()
        assert all(c.lock_in_mode == "user_caption" and c.user_caption is None for c in pair)


class TestWriteReport:
    def test_files_written_and_parse(self, tmp_path):
        build_dataset(tmp_path, "dev", count=2)
        dataset = load_dataset(tmp_path, "dev")
        report = run_grid(
            dataset, style_pair(ddim_steps=3), make_fake_suite(8, 8, 16), HashScorer(), make_pool()
        )
        paths = write_report(report, tmp_path / "out")
        table = paths["aggregates"].read_text().strip().splitlines()
        assert len(table) == 1 + len(report.aggregates)
        assert table[0].startswith("knobs\t")
        items = [json.loads(line) for line in paths["items"].open()]
        assert len(items) == len(report.rows)
        metadata = json.loads(paths["metadata"].read_text())
        assert metadata["baselines"]["InstructPix2Pix"]["clip_t"] == 0.2764
