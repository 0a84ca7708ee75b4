import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenebias.data import (
    DARK, LIGHT, ActionFamily, Clip, DatasetSpec, Role, dataset_file_size, draw_clip, generate_dataset,
    mask_actor, read_dataset, render_clip, scene_agreement, sprite_center, velocity, write_dataset,
)
from scenebias.errors import ConfigError, ContractError, FormatError

SPEC = DatasetSpec(count=64, seed=11)


def binomial_within(count, p_hat, p, sigmas=3.0):
    return abs(p_hat - p) <= sigmas * math.sqrt(p * (1 - p) / count) + 1e-12


class TestRender:
    def test_width_one_stripes_alternate(self):
        clip = render_clip(0, 0, 8, 8, SPEC)
        row = clip.pixels[0, 0]
        background = ~clip.actor_mask[0, 0]
        expected = np.array([DARK if c % 2 == 0 else LIGHT for c in range(SPEC.width)])
        assert np.array_equal(row[background], expected[background])

    @pytest.mark.parametrize("scene", range(4))
    def test_stripe_width_tracks_scene(self, scene):
        clip = render_clip(2, scene, 0, 0, SPEC)
        frame, mask = clip.pixels[3], clip.actor_mask[3]
        for c in range(SPEC.width):
            expected = DARK if (c // (scene + 1)) % 2 == 0 else LIGHT
            assert np.all(frame[~mask[:, c], c] == expected)

    def test_background_identical_across_frames(self):
        clip = render_clip(5, 3, 2, 9, SPEC)
        bg = ~clip.actor_mask.any(axis=0)
        for t in range(1, SPEC.frames):
            assert np.array_equal(clip.pixels[t][bg], clip.pixels[0][bg])

    def test_sprite_center_follows_velocity(self):
        assert velocity(0, ActionFamily.CARDINAL) == (0, 1)
        assert sprite_center(4, 4, 0, 3, SPEC) == (4, 7)
        clip = render_clip(0, 1, 4, 4, SPEC)
        rows, cols = np.nonzero(clip.actor_mask[3])
        assert sorted(set(rows)) == [3, 4, 5]
        assert sorted(set(cols)) == [6, 7, 8]

    def test_diagonal_family_rotates_assignment(self):
        for k in range(8):
            assert velocity(k, ActionFamily.DIAGONAL) == velocity((k + 1) % 8, ActionFamily.CARDINAL)

    def test_deterministic(self):
        a, b = render_clip(6, 2, 15, 0, SPEC), render_clip(6, 2, 15, 0, SPEC)
        assert a.pixels.tobytes() == b.pixels.tobytes()
        assert a.actor_mask.tobytes() == b.actor_mask.tobytes()

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 7), st.integers(0, 3), st.integers(0, 15), st.integers(0, 15))
    def test_sprite_has_nine_cells_and_pixels_in_range(self, action, scene, r, c):
        clip = render_clip(action, scene, r, c, SPEC)
        assert np.all(clip.actor_mask.reshape(SPEC.frames, -1).sum(axis=1) == 9)
        assert np.all(clip.pixels[clip.actor_mask] == 1.0)
        assert clip.pixels.min() >= 0 and clip.pixels.max() <= 1

    @pytest.mark.parametrize("args", [(8, 0, 0, 0), (0, 4, 0, 0), (0, 0, 16, 0), (0, 0, 0, -1)])
    def test_out_of_range(self, args):
        with pytest.raises(ContractError):
            render_clip(*args, SPEC)


class TestSpec:
    @pytest.mark.parametrize("kwargs", [{"num_actions": 9}, {"beta": 1.2}, {"beta": -0.1}, {"num_scenes": 5}, {"count": 0}])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DatasetSpec(**kwargs)


class TestGenerate:
    def test_clips_reproducible_in_isolation(self):
        split = generate_dataset(SPEC, Role.VAL)
        clip = draw_clip(SPEC, Role.VAL, 37)
        assert clip.pixels.tobytes() == split.clips[37].pixels.tobytes()
        assert (clip.action, clip.scene) == (split.clips[37].action, split.clips[37].scene)

    def test_roles_differ(self):
        a = generate_dataset(SPEC, Role.TRAIN).batch
        b = generate_dataset(SPEC, Role.TEST).batch
        assert a.pixels.tobytes() != b.pixels.tobytes()

    def test_labels_cover_all_actions(self):
        split = generate_dataset(replace(SPEC, count=200))
        assert len(split) == 200
        assert set(split.batch.actions.tolist()) == set(range(8))

    def test_beta_one_fully_confounded(self):
        split = generate_dataset(replace(SPEC, beta=1.0, count=500))
        assert scene_agreement(split) == 1.0

    @pytest.mark.parametrize("beta", [0.0, 0.9])
    def test_agreement_rate(self, beta):
        spec = replace(SPEC, beta=beta, count=10000, seed=5)
        p = beta + (1 - beta) / spec.num_scenes
        assert binomial_within(spec.count, scene_agreement(generate_dataset(spec)), p)

    def test_scene_marginal_uniform_when_unbiased(self):
        spec = replace(SPEC, beta=0.0, count=10000, seed=9)
        scenes = generate_dataset(spec).batch.scenes
        for m in range(spec.num_scenes):
            assert binomial_within(spec.count, np.mean(scenes == m), 1 / spec.num_scenes)


class TestMask:
    def test_empty_mask_leaves_frame(self):
        clip = render_clip(1, 2, 3, 3, SPEC)
        out = mask_actor(clip, np.zeros_like(clip.actor_mask))
        assert out.pixels.tobytes() == clip.pixels.tobytes()

    def test_uniform_frame_stays_uniform(self):
        c = 0.42
        mask = np.zeros((2, 4, 4), dtype=bool)
        mask[:, 1:3, 1:3] = True
        clip = Clip(np.full((2, 4, 4), c), 0, 0, mask)
        np.testing.assert_allclose(mask_actor(clip).pixels, c, rtol=0, atol=1e-15)

    def test_four_by_four_hand_sum(self):
        frame = np.arange(16, dtype=np.float64).reshape(4, 4) / 16.0
        mask = np.zeros((1, 4, 4), dtype=bool)
        mask[0, :3, :3] = True
        total = 0.0
        for v in frame.reshape(-1):
            total += v
        hand_mean = total / 16
        out = mask_actor(Clip(frame[None], 0, 0, mask)).pixels[0]
        assert np.all(np.abs(out[:3, :3] - hand_mean) <= 1e-12)
        assert np.array_equal(out[~mask[0]], frame[~mask[0]])

    def test_original_untouched_and_labels_kept(self):
        clip = render_clip(3, 1, 0, 5, SPEC)
        before = clip.pixels.copy()
        out = mask_actor(clip)
        assert np.array_equal(clip.pixels, before)
        assert (out.action, out.scene) == (clip.action, clip.scene)
        assert out.actor_mask is clip.actor_mask

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 7), st.integers(0, 3), st.integers(0, 15), st.integers(0, 15))
    def test_second_pass_fills_with_masked_frame_mean(self, action, scene, r, c):
        clip = render_clip(action, scene, r, c, SPEC)
        once = mask_actor(clip)
        twice = mask_actor(once)
        mask = clip.actor_mask
        means = once.pixels.mean(axis=(1, 2))
        for t in range(SPEC.frames):
            assert np.all(np.abs(twice.pixels[t][mask[t]] - means[t]) <= 1e-12)
            assert np.array_equal(twice.pixels[t][~mask[t]], clip.pixels[t][~mask[t]])
        assert once.pixels.min() >= 0 and once.pixels.max() <= 1

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.6))
    def test_idempotent_when_actor_mean_equals_frame_mean(self, seed, coverage):
        rng = np.random.default_rng(seed)
        frames = rng.uniform(0, 1, (3, 8, 8))
        mask = rng.random((3, 8, 8)) < coverage
        mask[:, 0, 0] = False
        mask[:, 7, 7] = True
        for t in range(3):
            frames[t][mask[t]] = frames[t][~mask[t]].mean()
        once = mask_actor(Clip(frames, 0, 0, mask))
        twice = mask_actor(once)
        assert np.max(np.abs(twice.pixels - once.pixels)) <= 1e-12


class TestFileFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        split = generate_dataset(SPEC, Role.VAL)
        path = tmp_path / "d.sbd"
        write_dataset(path, split)
        assert path.stat().st_size == dataset_file_size(SPEC)
        back = read_dataset(path)
        assert back.role == Role.VAL and back.spec.seed == SPEC.seed
        assert back.batch.pixels.tobytes() == split.batch.pixels.tobytes()
        assert np.array_equal(back.batch.masks, split.batch.masks)
        assert np.array_equal(back.batch.actions, split.batch.actions)

    def test_size_arithmetic(self):
        spec = DatasetSpec(beta=0.9, count=2000, seed=7)
        assert dataset_file_size(spec) == 4 + 4 * 6 + 8 + 2 + 2000 * (4 + 8 * 16 * 16 * 4 + 256)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sbd"
        path.write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(FormatError, match="offset 0"):
            read_dataset(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.sbd"
        write_dataset(path, generate_dataset(replace(SPEC, count=3)))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError):
            read_dataset(path)
