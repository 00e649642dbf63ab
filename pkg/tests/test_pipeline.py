import dataclasses
import itertools

import numpy as np
import pytest
from PIL import Image

from instructedit.backends import DecodingParams, make_fake_suite
from instructedit.pipeline import (
    ConfigValidationError,
    EditConfig,
    EditRequest,
    PipelineError,
    direction_stats,
    edit,
    generate_directions,
    invert_only,
)
from instructedit.prompting import FewShotExample


@pytest.fixture()
def suite():
    return make_fake_suite(token_positions=8, embed_dim=16)


@pytest.fixture()
def pool():
    return [
        FewShotExample(
            transformation=f"swap item {i} for a lantern",
            before_captions=tuple(f"item {i} on a table, angle {j}" for j in range(4)),
            after_captions=tuple(f"a lantern on a table, angle {j}" for j in range(4)),
        )
        for i in range(5)
    ]


def make_image(size=32, seed=0):
    rng = np.random.default_rng(seed)
    return Image.fromarray(rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8), "RGB")


def fast_config(**kwargs):
    return EditConfig(**{"ddim_steps": 4, **kwargs})


class TestEditConfig:
    def test_defaults_valid(self):
        EditConfig()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_captions": 3},
            {"shots": 2},
            {"prompt_style": "florid"},
            {"lock_in_mode": "sometimes"},
            {"ddim_steps": 0},
            {"retry_limit": 0},
            {"parse_failure_policy": "shrug"},
            {"user_caption": "a cat"},  # requires lock_in_mode=user_caption
        ],
    )
    def test_invalid_knobs_rejected(self, kwargs):
        with pytest.raises(ConfigValidationError):
            EditConfig(**kwargs)

    def test_user_caption_required_at_edit_time(self, suite):
        config = fast_config(lock_in_mode="user_caption")
        with pytest.raises(ConfigValidationError):
            edit(EditRequest(image=make_image(), instruction="make it red", knobs=config), suite)

    def test_fingerprint_separates_styles_optionally(self):
        a = EditConfig(prompt_style="terse")
        b = EditConfig(prompt_style="detailed")
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint(include_style=False) == b.fingerprint(include_style=False)

    def test_empty_instruction_rejected(self):
        with pytest.raises(ConfigValidationError):
            EditRequest(image=make_image(), instruction="   ")


class TestEdit:
    def test_deterministic_repeat(self, suite, pool):
        request = EditRequest(
            image=make_image(), instruction="make the sky green", knobs=fast_config(rng_seed=5)
        )
        first = edit(request, suite, pool)
        second = edit(request, suite, pool)
        assert first.edited_image.tobytes() == second.edited_image.tobytes()
        assert first.inverted_reconstruction.tobytes() == second.inverted_reconstruction.tobytes()
        assert first.bundle == second.bundle
        assert first.provenance == second.provenance

    def test_zero_strength_equals_reconstruction(self, suite, pool):
        request = EditRequest(
            image=make_image(),
            instruction="make the sky green",
            knobs=fast_config(direction_strength=0.0),
        )
        result = edit(request, suite, pool)
        assert result.edited_image.tobytes() == result.inverted_reconstruction.tobytes()

    def test_caption_count_contract(self, suite, pool):
        for n in (1, 2, 4):
            request = EditRequest(
                image=make_image(),
                instruction="add a wooden bench",
                knobs=fast_config(n_captions=n, lock_in_mode="generated_caption"),
            )
            result = edit(request, suite, pool)
            assert len(result.bundle.before) == n
            assert len(result.bundle.after) == n

    def test_knob_grid_smoke(self, suite, pool):
        for shots, n, style, lock in itertools.product(
            (0, 1, 3), (1, 2, 4), ("terse", "detailed"), ("none", "generated_caption", "user_caption")
        ):
            config = fast_config(
                shots=shots,
                n_captions=n,
                prompt_style=style,
                lock_in_mode=lock,
                user_caption="a small boat on a lake" if lock == "user_caption" else None,
            )
            request = EditRequest(image=make_image(), instruction="turn the boat red", knobs=config)
            result = edit(request, suite, pool)
            assert result.provenance["degraded"] is False

    def test_user_caption_skips_captioner(self, suite, pool):
        config = fast_config(lock_in_mode="user_caption", user_caption="a small boat on a lake")
        request = EditRequest(image=make_image(), instruction="turn the boat red", knobs=config)
        result = edit(request, suite, pool)
        assert suite.captioner.calls == 0
        assert result.caption_used == "a small boat on a lake"
        assert result.provenance["caption_source"] == "user-provided"

    def test_generated_lock_uses_captioner_output(self, suite, pool):
        config = fast_config(lock_in_mode="generated_caption")
        request = EditRequest(image=make_image(), instruction="turn the boat red", knobs=config)
        result = edit(request, suite, pool)
        assert result.bundle.before[0] == result.caption_used
        assert result.bundle.lock_source == "generated-captioner"

    def test_replay_from_provenance(self, suite, pool):
        request = EditRequest(
            image=make_image(seed=3), instruction="give the dog a scarf", knobs=fast_config(rng_seed=11)
        )
        result = edit(request, suite, pool)
        rebuilt = EditConfig(**result.provenance["config"])
        replayed = edit(
            EditRequest(
                image=make_image(seed=3),
                instruction=result.provenance["instruction"],
                knobs=rebuilt,
            ),
            make_fake_suite(token_positions=8, embed_dim=16),
            pool,
        )
        assert replayed.edited_image.tobytes() == result.edited_image.tobytes()

    def test_provenance_records_backends_and_seeds(self, suite, pool):
        request = EditRequest(image=make_image(), instruction="add snow", knobs=fast_config(rng_seed=2))
        result = edit(request, suite, pool)
        prov = result.provenance
        assert prov["config"]["rng_seed"] == 2
        assert prov["backends"] == suite.identifiers
        assert prov["schedule_steps"] == 4
        assert prov["retries"] == 0


class StubLanguageModel:
    """Fails the first n calls with unparseable junk, then delegates to the fake."""

    def __init__(self, failures, inner):
        self.failures = failures
        self.inner = inner
        self.calls = 0

    def complete(self, prompt, params):
        self.calls += 1
        if self.calls <= self.failures:
            return "no captions here at all"
        return self.inner.complete(prompt, params)


class TestFailurePolicy:
    def test_retry_then_success_counts_retries(self, suite, pool):
        inner = suite.language_model
        suite.language_model = StubLanguageModel(2, inner)
        request = EditRequest(
            image=make_image(), instruction="paint the fence white", knobs=fast_config(retry_limit=3)
        )
        result = edit(request, suite, pool)
        assert result.provenance["retries"] == 2
        assert result.provenance["degraded"] is False

    def test_fallback_bundle_after_exhaustion(self, suite, pool):
        suite.language_model = StubLanguageModel(99, suite.language_model)
        request = EditRequest(
            image=make_image(), instruction="paint the fence white", knobs=fast_config(retry_limit=3)
        )
        result = edit(request, suite, pool)
        assert result.provenance["degraded"] is True
        assert result.bundle.before == (result.caption_used,)
        assert result.bundle.after == ("paint the fence white",)

    def test_error_policy_raises_generation_stage(self, suite, pool):
        suite.language_model = StubLanguageModel(99, suite.language_model)
        request = EditRequest(
            image=make_image(),
            instruction="paint the fence white",
            knobs=fast_config(retry_limit=2, parse_failure_policy="error"),
        )
        with pytest.raises(PipelineError) as exc_info:
            edit(request, suite, pool)
        assert exc_info.value.stage == "generation"


class TestStageLabels:
    def test_captioner_failure_labeled(self, suite, pool):
        class BrokenCaptioner:
            def caption(self, image):
                raise RuntimeError("no caption for you")

        suite.captioner = BrokenCaptioner()
        with pytest.raises(PipelineError) as exc_info:
            edit(EditRequest(image=make_image(), instruction="x y z", knobs=fast_config()), suite, pool)
        assert exc_info.value.stage == "captioning"

    def test_codec_failure_labeled_inversion(self, suite, pool):
        class BrokenCodec:
            def encode(self, image):
                raise RuntimeError("vae fell over")

            def decode(self, state):
                raise RuntimeError("vae fell over")

        suite.latent_codec = BrokenCodec()
        with pytest.raises(PipelineError) as exc_info:
            edit(EditRequest(image=make_image(), instruction="x y z", knobs=fast_config()), suite, pool)
        assert exc_info.value.stage == "inversion"

    def test_language_model_failure_labeled_generation(self, suite, pool):
        class BrokenLlm:
            def complete(self, prompt, params):
                raise RuntimeError("llm down")

        suite.language_model = BrokenLlm()
        with pytest.raises(PipelineError) as exc_info:
            edit(EditRequest(image=make_image(), instruction="x y z", knobs=fast_config()), suite, pool)
        assert exc_info.value.stage == "generation"


class TestInvertOnly:
    def test_deterministic(self, suite):
        image = make_image(seed=4)
        first = invert_only(image, None, suite, ddim_steps=4)
        second = invert_only(image, None, suite, ddim_steps=4)
        assert first[0].latent.tobytes() == second[0].latent.tobytes()
        assert first[1].tobytes() == second[1].tobytes()
        assert first[2] == second[2]

    def test_supplied_caption_skips_captioner(self, suite):
        invert_only(make_image(), "a brown teddy bear", suite, ddim_steps=4)
        assert suite.captioner.calls == 0

    def test_reconstruction_shape_matches_input(self, suite):
        image = make_image(48)
        _, reconstruction, _ = invert_only(image, None, suite, ddim_steps=4)
        assert reconstruction.size == image.size

    def test_noise_latent_sits_at_max_timestep(self, suite):
        noise, _, _ = invert_only(make_image(), None, suite, ddim_steps=4)
        schedule = suite.schedule_builder(4)
        assert noise.timestep == schedule.max_timestep


class TestGenerateDirections:
    def test_bundle_sizes_match_config(self, suite, pool):
        for n in (1, 2, 4):
            bundle, direction, completion = generate_directions(
                "make it a dog", fast_config(n_captions=n), suite, pool
            )
            assert bundle.n_captions == n
            assert completion
            assert direction.matrix.shape == (8, 16)

    def test_lock_in_appears_first(self, suite, pool):
        bundle, _, _ = generate_directions(
            "make it a dog",
            fast_config(lock_in_mode="generated_caption"),
            suite,
            pool,
            caption="A photo of an orange cat.",
        )
        assert bundle.before[0] == "A photo of an orange cat."

    def test_generated_lock_without_caption_rejected(self, suite, pool):
        with pytest.raises(PipelineError) as exc_info:
            generate_directions(
                "make it a dog", fast_config(lock_in_mode="generated_caption"), suite, pool
            )
        assert exc_info.value.stage == "generation"

    def test_swapped_sets_negate_direction(self, suite, pool):
        from instructedit.direction import compute_direction

        bundle, direction, _ = generate_directions("make it a dog", fast_config(), suite, pool)
        before = [suite.text_encoder.encode(t) for t in bundle.before]
        after = [suite.text_encoder.encode(t) for t in bundle.after]
        swapped = compute_direction(after, before)
        np.testing.assert_array_equal(swapped.matrix, -direction.matrix)

    def test_direction_stats_shape(self, suite, pool):
        _, direction, _ = generate_directions("make it a dog", fast_config(), suite, pool)
        stats = direction_stats(direction)
        assert stats["shape"] == [8, 16]
        assert stats["l2_norm"] > 0
