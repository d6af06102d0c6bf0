import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resinv.denoiser import Conditioning, predict_eps
from resinv.errors import ScheduleError, WeightFileError
from resinv.glyphs import IdentityParams, make_dataset
from resinv.inversion import (
    METHODS,
    DdimTrajectory,
    ResidualTrack,
    bench_inversions,
    ddim_invert,
    load_residuals,
    load_trajectory,
    nti_invert,
    reconstruct_ddim,
    reconstruct_nti,
    reconstruct_res,
    reconstruction_error,
    res_invert,
    run_method,
    save_residuals,
    save_trajectory,
)
from resinv.schedule import NoiseSchedule, ddim_step, default_schedule

SCHED = default_schedule()


def _sample(seed):
    s = make_dataset(1, seed)[0]
    return s.image, Conditioning(s.scene_code, s.identity, guidance=3.0)


def _sampling_trajectory(model, z_T, cond):
    """Anchors produced by sampling, so the model's prediction at each anchor is exact."""
    zs = [np.asarray(z_T, np.float32)]
    for t in range(SCHED.T, 0, -1):
        zs.append(ddim_step(SCHED, zs[-1], predict_eps(model, zs[-1], t, cond), t).astype(np.float32))
    return DdimTrajectory(zs[::-1], cond, SCHED)


def test_trajectory_shape_and_anchor(tiny_model):
    img, cond = _sample(0)
    traj = ddim_invert(tiny_model, img, cond)
    assert len(traj.latents) == SCHED.T + 1
    assert traj.latents[0].tobytes() == np.asarray(img, np.float32).tobytes()
    assert traj.start is traj.latents[-1]


def test_single_step_schedule_gives_two_latents(tiny_model):
    sched = NoiseSchedule(np.array([0.5]))
    img, cond = _sample(1)
    assert len(ddim_invert(tiny_model, img, cond, sched).latents) == 2


def test_inversion_is_deterministic(tiny_model):
    img, cond = _sample(2)
    a, b = ddim_invert(tiny_model, img, cond), ddim_invert(tiny_model, img, cond)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.latents, b.latents))


def test_replaying_inversion_predictions_recovers_the_image(tiny_model):
    img, cond = _sample(3)
    traj = ddim_invert(tiny_model, img, cond)
    z = traj.start
    for t in range(SCHED.T, 0, -1):
        eps = predict_eps(tiny_model, traj.latents[t - 1], t, cond)
        z = ddim_step(SCHED, z, eps, t).astype(np.float32)
    assert reconstruction_error(z, img)[0] <= 1e-4


def test_trajectory_length_is_validated():
    with pytest.raises(ScheduleError):
        DdimTrajectory([np.zeros((16, 16))] * 3, Conditioning(0), SCHED)
    with pytest.raises(ScheduleError):
        ResidualTrack([np.zeros((16, 16))] * 3, Conditioning(0), SCHED)


def test_exact_predictions_leave_zero_residuals(tiny_model):
    free = Conditioning(2, None, guidance=3.0)
    z_T = np.random.default_rng(0).normal(size=(16, 16)).astype(np.float32)
    traj = _sampling_trajectory(tiny_model, z_T, free)
    track = res_invert(tiny_model, traj, free)
    assert max(np.abs(r).max() for r in track.residuals) <= 1e-4
    assert len(track.norms()) == SCHED.T and all(np.isfinite(track.norms()))


def test_zero_residuals_reduce_to_plain_ddim(tiny_model):
    free = Conditioning(2, None, guidance=3.0)
    z_T = np.random.default_rng(1).normal(size=(16, 16)).astype(np.float32)
    zero = ResidualTrack([np.zeros((16, 16), np.float32)] * SCHED.T, free, SCHED)
    a = reconstruct_res(tiny_model, zero, z_T, free).pixels
    b = reconstruct_ddim(tiny_model, z_T, free).pixels
    assert a.tobytes() == b.tobytes()


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_residual_replay_is_exact(tiny_model, seed):
    img, cond = _sample(seed)
    assert reconstruction_error(run_method("res", tiny_model, img, cond), img)[0] <= 1e-4


def test_residual_perturbation_changes_output(tiny_model):
    img, cond = _sample(4)
    free = cond.free()
    traj = ddim_invert(tiny_model, img, cond)
    track = res_invert(tiny_model, traj, free)
    base = reconstruct_res(tiny_model, track, traj.start, free).pixels
    bumped = list(track.residuals)
    bumped[SCHED.T // 2 - 1] = bumped[SCHED.T // 2 - 1] + 0.1
    moved = reconstruct_res(tiny_model, ResidualTrack(bumped, free, SCHED), traj.start, free).pixels
    assert np.abs(moved - base).max() > 1e-3


def test_residuals_need_free_conditioning(tiny_model):
    img, cond = _sample(5)
    traj = ddim_invert(tiny_model, img, cond)
    with pytest.raises(ValueError):
        res_invert(tiny_model, traj, cond)
    with pytest.raises(ValueError):
        res_invert(tiny_model, traj, Conditioning(cond.scene_code + 1 if cond.scene_code < 5 else 0))


def test_nti_preconditions(tiny_model):
    img, cond = _sample(6)
    traj = ddim_invert(tiny_model, img, cond)
    with pytest.raises(ValueError):
        nti_invert(tiny_model, traj, cond, inner_iters=0)
    with pytest.raises(ValueError):
        nti_invert(tiny_model, traj, cond.with_guidance(1.0))


def test_nti_never_ends_worse_than_it_starts(tiny_model):
    img, cond = _sample(7)
    nulls = nti_invert(tiny_model, ddim_invert(tiny_model, img, cond), cond, inner_iters=5)
    assert nulls.T == SCHED.T
    assert all(a <= b for a, b in zip(nulls.losses_after, nulls.losses_before))
    assert all(0 <= k <= 5 for k in nulls.iterations)
    assert all(e.shape == tiny_model.null_token.shape for e in nulls.embeddings)


def test_nti_reconstruction_is_deterministic(tiny_model):
    img, cond = _sample(8)
    traj = ddim_invert(tiny_model, img, cond)
    nulls = nti_invert(tiny_model, traj, cond, inner_iters=2)
    a = reconstruct_nti(tiny_model, nulls, traj.start, cond).pixels
    b = reconstruct_nti(tiny_model, nulls, traj.start, cond).pixels
    assert a.tobytes() == b.tobytes()


def test_nti_early_stop_skips_updates(tiny_model):
    img, cond = _sample(9)
    traj = ddim_invert(tiny_model, img, cond)
    nulls = nti_invert(tiny_model, traj, cond, inner_iters=3, early_stop_eps=1e9)
    assert nulls.iterations == [0] * SCHED.T


def test_nti_on_exact_anchors_has_nothing_to_fix(tiny_model):
    cond = Conditioning(1, IdentityParams("disk", 1.0, 2.0), guidance=3.0)
    z_T = np.random.default_rng(2).normal(size=(16, 16)).astype(np.float32)
    traj = _sampling_trajectory(tiny_model, z_T, cond)
    nulls = nti_invert(tiny_model, traj, cond, inner_iters=3)
    recon = reconstruct_nti(tiny_model, nulls, traj.start, cond)
    # images are clamped to [-1, 1]; the tiny model's samples are not
    assert reconstruction_error(recon, np.clip(traj.latents[0], -1, 1))[0] <= 1e-4


def test_unknown_method(tiny_model):
    img, cond = _sample(0)
    with pytest.raises(ValueError):
        run_method("renoise", tiny_model, img, cond)


def test_bench_preconditions(tiny_model):
    img, cond = _sample(0)
    with pytest.raises(ValueError):
        bench_inversions(tiny_model, [img], [cond], METHODS, repeats=1)
    with pytest.raises(ValueError):
        bench_inversions(tiny_model, [], [], METHODS, repeats=3)


def test_bench_report_schema(tiny_model):
    img, cond = _sample(0)
    reps = bench_inversions(tiny_model, [img], [cond], ("ddim", "res"), repeats=3)
    assert [r.method for r in reps] == ["ddim", "res"]
    for r in reps:
        row = r.row()
        assert list(row) == ["method", "T", "inner_iters", "latency_s", "max_abs_err", "mse"]
        assert row["T"] == SCHED.T and row["inner_iters"] is None
        assert min(row["latency_s"], row["max_abs_err"], row["mse"]) >= 0
        assert len(r.latencies) == 3


def test_track_files_round_trip(tiny_model, tmp_path):
    img, cond = _sample(10)
    traj = ddim_invert(tiny_model, img, cond)
    track = res_invert(tiny_model, traj, cond.free())
    save_trajectory(tmp_path / "a.rtrk", traj)
    save_residuals(tmp_path / "r.rtrk", track)
    t2 = load_trajectory(tmp_path / "a.rtrk", SCHED, cond)
    r2 = load_residuals(tmp_path / "r.rtrk", SCHED, cond.free())
    assert all(a.tobytes() == b.tobytes() for a, b in zip(traj.latents, t2.latents))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(track.residuals, r2.residuals))
    assert (tmp_path / "a.rtrk").read_bytes()[:4] == b"RTRK"


def test_track_files_reject_mismatches(tiny_model, tmp_path):
    img, cond = _sample(11)
    traj = ddim_invert(tiny_model, img, cond)
    path = tmp_path / "a.rtrk"
    save_trajectory(path, traj)
    other = NoiseSchedule(np.linspace(0.01, 0.3, SCHED.T))
    with pytest.raises(WeightFileError):
        load_trajectory(path, other, cond)
    with pytest.raises(WeightFileError):
        load_residuals(path, SCHED, cond.free())
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(WeightFileError):
        load_trajectory(path, SCHED, cond)


# -- trained-model behaviour ---------------------------------------------------

@pytest.mark.slow
def test_nti_more_iterations_reconstruct_better(pers_model):
    one, ten = [], []
    for seed in range(10):
        img, cond = _sample(100 + seed)
        one.append(reconstruction_error(run_method("nti", pers_model, img, cond, inner_iters=1), img)[1])
        ten.append(reconstruction_error(run_method("nti", pers_model, img, cond, inner_iters=10), img)[1])
    assert np.median(ten) <= np.median(one)


@pytest.mark.slow
def test_nti_mse_non_increasing_in_inner_iters(pers_model):
    sweep = (1, 5, 10, 25)
    curves = []
    for seed in range(5):
        img, cond = _sample(200 + seed)
        curves.append([reconstruction_error(run_method("nti", pers_model, img, cond, inner_iters=k),
                                            img)[1] for k in sweep])
    med = np.median(curves, axis=0)
    for prev, cur in zip(med, med[1:]):
        assert cur <= prev * 1.10, med


@pytest.mark.slow
def test_trained_model_guided_ddim_is_worse_than_residual_replay(pers_model):
    img, cond = _sample(300)
    ddim = reconstruction_error(run_method("ddim", pers_model, img, cond), img)[1]
    nti = reconstruction_error(run_method("nti", pers_model, img, cond), img)[1]
    res = reconstruction_error(run_method("res", pers_model, img, cond), img)[1]
    assert res < nti < ddim


@pytest.mark.slow
def test_unguided_ddim_on_an_overfit_model_is_nearly_exact():
    from conftest import _overfit_single_image

    model, img, cond = _overfit_single_image()
    guided = reconstruction_error(run_method("ddim", model, img, cond.with_guidance(3.0)), img)[1]
    plain = reconstruction_error(run_method("ddim", model, img, cond.with_guidance(1.0)), img)[1]
    assert plain < 1e-3 and plain <= guided
