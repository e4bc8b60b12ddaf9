import numpy as np
import pytest
import torch

from trajlab import stmdio
from trajlab.igso3 import IGSO3Table
from trajlab.model import Denoiser, DenoiserConfig
from trajlab.rollout import (
    GenerationError,
    RolloutConfig,
    cache_memory_bytes,
    generate,
    sequential_scores,
)
from trajlab.schedule import NoiseSchedule
from trajlab.synth import SynthConfig, synth_generate
from trajlab.training import TrainConfig, parallel_scores, sample_training_example


@pytest.fixture(scope="module")
def fast_schedule():
    return NoiseSchedule(steps=15)


@pytest.fixture(scope="module")
def model(fast_schedule):
    return Denoiser(DenoiserConfig(), fast_schedule).randomize(np.random.default_rng(2))


@pytest.fixture(scope="module")
def init_frame():
    return synth_generate(SynthConfig(n_residues=5), 1, seed=3).frame_sets[0]


# -- cache arithmetic ----------------------------------------------------------


def test_cache_memory_bytes_paper_values():
    singles = cache_memory_bytes(200, 32, 256, 1, 4, "singles")
    pairs = cache_memory_bytes(200, 32, 256, 1, 4, "singles_plus_pairs")
    assert singles == 6_553_600
    assert pairs == 1_317_273_600
    assert 195.0 <= pairs / singles <= 205.0


def test_cache_memory_scales_with_layers():
    assert cache_memory_bytes(10, 4, 8, 3, 8) == 3 * cache_memory_bytes(10, 4, 8, 1, 8)


def test_cache_memory_rejects_unknown_variant():
    with pytest.raises(ValueError):
        cache_memory_bytes(4, 4, 4, variant="everything")


# -- generation ----------------------------------------------------------------


def test_generate_single_frame_unconditional(model, fast_schedule, igso3_table):
    traj, info = generate(
        model, None, 1, 0.04, np.random.default_rng(5), n_residues=5,
        schedule=fast_schedule, table=igso3_table,
    )
    assert traj.n_frames == 1
    assert traj.n_residues == 5
    assert info["frames"] == 1


def test_generate_requires_residue_count(model, fast_schedule):
    with pytest.raises(ValueError, match="n_residues"):
        generate(model, None, 1, 0.04, np.random.default_rng(0), schedule=fast_schedule)


def test_generate_seed_determinism_file_bytes(model, fast_schedule, igso3_table, init_frame, tmp_path):
    blobs = []
    for _ in range(2):
        traj, _ = generate(
            model, init_frame, 2, 0.04, np.random.default_rng(9),
            schedule=fast_schedule, table=igso3_table,
        )
        blobs.append(stmdio.to_bytes(traj))
    assert blobs[0] == blobs[1]


def test_generate_prefix_stable_under_extension(model, fast_schedule, igso3_table, init_frame):
    """Committed frames are never mutated by later generation."""
    t2, _ = generate(
        model, init_frame, 2, 0.04, np.random.default_rng(11),
        schedule=fast_schedule, table=igso3_table,
    )
    t4, _ = generate(
        model, init_frame, 4, 0.04, np.random.default_rng(11),
        schedule=fast_schedule, table=igso3_table,
    )
    assert np.array_equal(t2.translations(), t4.translations()[:3])
    assert np.array_equal(t2.quaternions(), t4.quaternions()[:3])


def test_generate_cached_equals_uncached(model, fast_schedule, igso3_table, init_frame):
    a, _ = generate(
        model, init_frame, 3, 0.04, np.random.default_rng(13),
        schedule=fast_schedule, table=igso3_table, cfg=RolloutConfig(use_cache=True),
    )
    b, _ = generate(
        model, init_frame, 3, 0.04, np.random.default_rng(13),
        schedule=fast_schedule, table=igso3_table, cfg=RolloutConfig(use_cache=False),
    )
    assert np.abs(a.translations() - b.translations()).max() < 1e-9
    assert np.abs(a.quaternions() - b.quaternions()).max() < 1e-9


def test_generate_cache_growth_law(model, fast_schedule, igso3_table, init_frame):
    _, info = generate(
        model, init_frame, 3, 0.04, np.random.default_rng(15),
        schedule=fast_schedule, table=igso3_table,
    )
    cfg = model.cfg
    expected = cache_memory_bytes(5, 4, cfg.model_dim, cfg.n_layers, 4)
    assert info["cache_bytes_final"] == expected


class _ZeroRng:
    """Deterministic sampler: every Gaussian draw is zero, uniforms fixed."""

    def standard_normal(self, shape=()):
        return np.zeros(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        mid = 0.5 * (low + high)
        return mid if size is None else np.full(size, mid)


def test_generate_pure_function_with_deterministic_sampler(model, fast_schedule, igso3_table, init_frame):
    cfg = RolloutConfig(ctx_noise="off")
    outs = []
    for _ in range(2):
        traj, _ = generate(
            model, init_frame, 2, 0.04, _ZeroRng(),
            schedule=fast_schedule, table=igso3_table, cfg=cfg,
        )
        outs.append(traj)
    assert np.array_equal(outs[0].translations(), outs[1].translations())
    assert np.array_equal(outs[0].quaternions(), outs[1].quaternions())


def test_generate_ctx_noise_modes(model, fast_schedule, igso3_table, init_frame):
    for mode in ("resample", "fixed", "off"):
        traj, info = generate(
            model, init_frame, 1, 0.04, np.random.default_rng(17),
            schedule=fast_schedule, table=igso3_table, cfg=RolloutConfig(ctx_noise=mode),
        )
        assert info["ctx_noise"] == mode


def test_generate_stride_warning(model, fast_schedule, igso3_table, init_frame):
    with pytest.warns(UserWarning, match="outside the trained range"):
        generate(
            model, init_frame, 1, 100.0, np.random.default_rng(19),
            schedule=fast_schedule, table=igso3_table,
        )


def test_generate_nan_abort_carries_partial(fast_schedule, igso3_table, init_frame):
    """A poisoned model (NaN weights) must abort with diagnostics."""
    bad = Denoiser(DenoiserConfig(), fast_schedule)
    with torch.no_grad():
        bad.single_proj.weight.fill_(float("nan"))
    with pytest.raises(GenerationError) as exc_info:
        generate(
            bad, init_frame, 2, 0.04, np.random.default_rng(21),
            schedule=fast_schedule, table=igso3_table,
        )
    err = exc_info.value
    assert "error" in err.info
    assert err.partial_trajectory is not None
    assert err.partial_trajectory.n_frames >= 1


def test_generate_records_stride(model, fast_schedule, igso3_table, init_frame):
    traj, info = generate(
        model, init_frame, 2, 1.2, np.random.default_rng(23),
        schedule=fast_schedule, table=igso3_table,
    )
    assert traj.uniform_stride == 1.2
    assert info["stride_ns"] == 1.2


# -- sequential oracle -----------------------------------------------------------


def test_sequential_matches_parallel(model, fast_schedule, igso3_table):
    traj = synth_generate(SynthConfig(n_residues=5), 128, seed=7)
    for L in (1, 3):
        ex = sample_training_example(
            traj, TrainConfig(frames_per_sample=L), fast_schedule, igso3_table,
            np.random.default_rng(L),
        )
        with torch.no_grad():
            tp, rp = parallel_scores(model, ex)
        ts, rs = sequential_scores(model, ex)
        assert float((tp - ts).abs().max()) < 1e-10
        assert float((rp - rs).abs().max()) < 1e-10
