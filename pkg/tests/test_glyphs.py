import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resinv.errors import ParamError, ShapeError
from resinv.glyphs import (
    INTENSITIES,
    KINDS,
    NO_GLYPH_THRESHOLD,
    OFFSETS,
    PLATE,
    RADII,
    SIZE,
    IdentityParams,
    RenderedImage,
    SceneParams,
    background_diversity,
    band_mask,
    exterior_mask,
    fit_identity,
    glyph_swap,
    identity_error,
    identity_grid,
    image_grid,
    make_dataset,
    random_identity,
    read_pgm,
    render,
    render_background,
    ring_mask,
    scene_for_code,
    write_manifest,
    write_pgm,
)

SCENE = SceneParams("stripes", 0.7, 2.0, 0.1)
IDENT = IdentityParams("triangle", 0.6571, 2.5, (0.0, 0.5))

seeds = st.integers(0, 2**32 - 1)


def _scene(seed):
    return scene_for_code(seed % 6, np.random.default_rng(seed))


def test_identity_grid_size():
    grid = identity_grid()
    assert len(grid) == len(KINDS) * len(INTENSITIES) * len(RADII) * len(OFFSETS) == 4 * 8 * 4 * 9
    assert len({g.grid_index for g in grid}) == len(grid)


def test_render_is_deterministic():
    a, b = render(SCENE, IDENT), render(SCENE, IDENT)
    assert a.pixels.tobytes() == b.pixels.tobytes()


def test_glyph_too_close_to_plate_is_rejected():
    with pytest.raises(ParamError):
        IdentityParams("disk", PLATE + 0.1, 2.0)


@pytest.mark.parametrize("kw", [
    dict(kind="star", intensity=1.0, radius=2.0),
    dict(kind="disk", intensity=1.5, radius=2.0),
    dict(kind="disk", intensity=1.0, radius=0.0),
    dict(kind="disk", intensity=1.0, radius=3.0, offset=(1.0, 0.0)),
])
def test_invalid_identities(kw):
    with pytest.raises(ParamError):
        IdentityParams(**kw)


@pytest.mark.parametrize("kw", [
    dict(family="waves", angle=0.0, frequency=1.0, base=0.0),
    dict(family="blobs", angle=4.0, frequency=1.0, base=0.0),
    dict(family="blobs", angle=0.0, frequency=9.0, base=0.0),
    dict(family="blobs", angle=0.0, frequency=1.0, base=0.9),
])
def test_invalid_scenes(kw):
    with pytest.raises(ParamError):
        SceneParams(**kw)


def test_exterior_equals_pure_background():
    img = render(SCENE, IdentityParams("disk", 1.0, 3.0))
    bg = render_background(SCENE)
    ext = exterior_mask()
    assert img.pixels[ext].tobytes() == np.clip(bg, -1, 1)[ext].astype(np.float32).tobytes()


@settings(max_examples=40, deadline=None)
@given(seed=seeds)
def test_renders_are_clamped(seed):
    r = np.random.default_rng(seed)
    px = render(_scene(seed), random_identity(r)).pixels
    assert px.shape == (SIZE, SIZE) and px.dtype == np.float32
    assert px.min() >= -1.0 and px.max() <= 1.0


def test_rendered_image_clamps_and_validates():
    img = RenderedImage(np.full((SIZE, SIZE), 3.0))
    assert img.pixels.max() == 1.0
    with pytest.raises(ShapeError):
        RenderedImage(np.zeros(5))
    with pytest.raises(ParamError):
        RenderedImage(np.zeros((SIZE, SIZE)), tag="draft")


def test_self_swap_without_blur_is_identity():
    img = render(SCENE, IDENT)
    assert glyph_swap(img, IDENT, blur_edges=False).pixels.tobytes() == img.pixels.tobytes()


@settings(max_examples=40, deadline=None)
@given(seed=seeds)
def test_swap_locality(seed):
    r = np.random.default_rng(seed)
    img = render(_scene(seed), random_identity(r))
    target = random_identity(r)
    ext = exterior_mask()
    sharp = glyph_swap(img, target, blur_edges=False)
    soft = glyph_swap(img, target, blur_edges=True)
    assert sharp.pixels[ext].tobytes() == img.pixels[ext].tobytes()
    assert soft.pixels[ext].tobytes() == img.pixels[ext].tobytes()
    inner = ~ext & ~band_mask()
    assert soft.pixels[inner].tobytes() == sharp.pixels[inner].tobytes()
    assert soft.tag == "swapped"


def test_blur_changes_the_band():
    img = render(SceneParams("gradient", 0.0, 1.0, 0.5), IDENT)
    sharp = glyph_swap(img, IdentityParams("ring", 1.0, 3.0), blur_edges=False)
    soft = glyph_swap(img, IdentityParams("ring", 1.0, 3.0), blur_edges=True)
    band = band_mask()
    assert np.abs(soft.pixels[band] - sharp.pixels[band]).max() > 0.05


def test_band_is_the_box_rim():
    band = band_mask()
    box = ~exterior_mask()
    assert band.sum() == 8 * 4 - 4
    assert np.all(box[band])


def test_swap_then_fit_recovers_target():
    r = np.random.default_rng(3)
    for _ in range(20):
        target = random_identity(r)
        img = render(_scene(int(r.integers(1 << 30))), random_identity(r))
        fit = fit_identity(glyph_swap(img, target, blur_edges=False))
        assert fit.params == target and fit.residual == 0.0


@pytest.mark.slow
def test_fit_recovers_every_grid_identity():
    for ident in identity_grid():
        fit = fit_identity(render(SCENE, ident))
        assert fit.params == ident and fit.residual == 0.0


def test_pure_background_has_no_glyph():
    r = np.random.default_rng(0)
    for _ in range(100):
        code = int(r.integers(6))
        bg = RenderedImage(render_background(scene_for_code(code, r)))
        fit = fit_identity(bg)
        assert fit.residual > NO_GLYPH_THRESHOLD and not fit.found


def test_identity_error_zero_on_clean_render():
    assert identity_error(render(SCENE, IDENT), IDENT) == 0.0
    assert identity_error(render(SCENE, IDENT), IdentityParams("disk", 1.0, 1.5)) > 0.0


def test_background_diversity_examples():
    a = render(SCENE, IDENT)
    assert background_diversity([a, a]) == 0.0
    b = glyph_swap(a, IdentityParams("cross", 1.0, 3.0), blur_edges=False)
    assert background_diversity([a, b]) == 0.0
    r = np.random.default_rng(1)
    imgs = [render(_scene(int(r.integers(1 << 30))), random_identity(r)) for _ in range(10)]
    assert background_diversity(imgs) > 0.0
    with pytest.raises(ShapeError):
        background_diversity([a])


def test_background_diversity_matches_pairwise_definition():
    r = np.random.default_rng(2)
    imgs = [render(_scene(int(r.integers(1 << 30))), random_identity(r)) for _ in range(5)]
    ext = exterior_mask()
    pairs = [((imgs[i].pixels[ext].astype(np.float64) - imgs[j].pixels[ext]) ** 2).mean()
             for i in range(5) for j in range(i + 1, 5)]
    assert background_diversity(imgs) == pytest.approx(np.mean(pairs), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=seeds, perm_seed=seeds)
def test_background_diversity_permutation_invariant(seed, perm_seed):
    r = np.random.default_rng(seed)
    imgs = [render(_scene(int(r.integers(1 << 30))), random_identity(r)) for _ in range(4)]
    order = np.random.default_rng(perm_seed).permutation(4)
    assert background_diversity(imgs) == pytest.approx(
        background_diversity([imgs[i] for i in order]), rel=1e-12)


def test_pgm_round_trip(tmp_path):
    img = render(SCENE, IDENT)
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n") and len(raw) == 13 + 256
    back = read_pgm(path)
    assert np.abs(back - img.pixels).max() <= 1 / 255 + 1e-6
    assert read_pgm(path).tobytes() == back.tobytes()


def test_pgm_rejects_garbage(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ShapeError):
        read_pgm(p)
    p.write_bytes(b"P5\n4 4\n255\n" + b"\0" * 3)
    with pytest.raises(ShapeError):
        read_pgm(p)


def test_dataset_is_seeded_and_manifest_is_json(tmp_path):
    a, b = make_dataset(12, 3), make_dataset(12, 3)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    assert make_dataset(12, 4)[0].image.tobytes() != a[0].image.tobytes()
    write_manifest(a, tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert len(doc) == 12
    assert IdentityParams.from_dict(doc[0]["identity"]) == a[0].identity


def test_dataset_fraction_validation():
    with pytest.raises(ParamError):
        make_dataset(0, 1)
    with pytest.raises(ParamError):
        make_dataset(4, 1, narrow_fraction=2.0)


def test_narrow_dataset_uses_canonical_scenes():
    for s in make_dataset(20, 9, narrow_fraction=1.0):
        assert s.scene == scene_for_code(s.scene_code)


def test_ring_mask_shape():
    m = ring_mask()
    assert m.shape == (SIZE, SIZE) and 0 < m.sum() < SIZE * SIZE
    assert m[8, 8] == 0 and m[0, 0] == 0


def test_image_grid_layout():
    imgs = [render(SCENE, IDENT)] * 3
    grid = image_grid(imgs, ncols=2)
    assert grid.shape == (2 * 17 + 1, 2 * 17 + 1)
    np.testing.assert_array_equal(grid[1:17, 1:17], imgs[0].pixels)
