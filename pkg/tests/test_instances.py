import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import minimize_scalar

from drl2o import instances as I


def test_quadratic_full_scale_spectra():
    ds = I.sample_quadratic_dataset(300, 1.0, 10.0, 10.0, {"train": 3, "test_ood": 2}, seed=0, L_ood=11.0)
    for q in ds.train:
        ev = np.linalg.eigvalsh(q.Q)
        assert ev[0] >= 1.0 - 1e-10 and ev[-1] <= 10.0 + 1e-10
        assert np.linalg.norm(q.x0) <= 10.0
    for q in ds.test_ood:
        ev = np.linalg.eigvalsh(q.Q)
        assert ev[0] >= 1.0 - 1e-10 and ev[-1] <= 11.0 + 1e-10


def test_quadratic_degenerate_identity():
    ds = I.sample_quadratic_dataset(1, 1.0, 1.0, 1.0, {"train": 2}, seed=0)
    for q in ds.train:
        np.testing.assert_array_equal(q.Q, [[1.0]])
        assert abs(q.x0[0]) <= 1.0


def test_quadratic_reference_is_origin(quad_ds):
    for q in quad_ds.train:
        assert q.reference.f_star == 0.0
        np.testing.assert_array_equal(q.reference.x_star, 0.0)


def test_quadratic_errors():
    with pytest.raises(ValueError):
        I.sample_quadratic_dataset(3, 2.0, 1.0, 1.0, {"train": 1}, 0)
    with pytest.raises(I.SamplerExhausted):
        I.sample_quadratic_dataset(3, 1.0, 10.0, 1.0, {"train": 1}, 0, max_attempts=0)


def test_regeneration_bit_identical():
    a = I.sample_quadratic_dataset(4, 1.0, 10.0, 2.0, {"train": 3, "val": 2}, seed=11)
    b = I.sample_quadratic_dataset(4, 1.0, 10.0, 2.0, {"train": 3, "val": 2}, seed=11)
    for x, y in zip(a.train + a.val, b.train + b.val):
        assert x.Q.tobytes() == y.Q.tobytes() and x.x0.tobytes() == y.x0.tobytes()
    c = I.sample_quadratic_dataset(4, 1.0, 10.0, 2.0, {"train": 3}, seed=12)
    assert c.train[0].Q.tobytes() != a.train[0].Q.tobytes()


def test_splits_disjoint_and_sized(quad_ds):
    assert quad_ds.sizes() == {"train": 12, "val": 4, "test": 6, "test_ood": 4}
    uids = [x.uid for items in quad_ds.splits.values() for x in items]
    assert len(set(uids)) == len(uids)


def test_lasso_full_scale_parameters_small_presolve():
    ds = I.sample_lasso_dataset(250, 500, 0.4, 2.0, 0.01, 0.1, {"train": 2, "test_ood": 1}, seed=0,
                                sigma_x_ood=3.0, presolve_count=3)
    A = ds.train[0].A
    np.testing.assert_allclose(np.linalg.norm(A, axis=0), 1.0, atol=1e-10)
    assert ds.test_ood[0].A is A  # same dictionary out of distribution
    assert abs(ds.train[0].smooth_L - np.linalg.eigvalsh(A.T @ A)[-1]) <= 1e-8
    assert ds.provenance["sigma_x_ood"] == 3.0
    for inst in ds.train:
        np.testing.assert_array_equal(inst.x0, 0.0)


def test_lasso_smooth_L_power_iteration(lasso_ds):
    A = lasso_ds.train[0].A
    v = np.ones(A.shape[1])
    for _ in range(5000):
        v = A.T @ (A @ v)
        v /= np.linalg.norm(v)
    est = float(v @ (A.T @ (A @ v)))
    assert abs(est - lasso_ds.train[0].smooth_L) <= 1e-6 * est


def test_lasso_zero_signal():
    ds = I.sample_lasso_dataset(6, 4, 0.1, 1.0, 0.3, 0.0, {"train": 3}, seed=2, presolve_count=5)
    # with p_mask = 0 the right-hand side is pure noise: recover it from the same stream
    for i, inst in enumerate(ds.train):
        rng = I._rng(2, I._SPLIT_CODE["train"], i)
        expected = I._lasso_rhs(rng, inst.A, 1.0, 0.3, 0.0)
        np.testing.assert_array_equal(inst.b, expected)
        assert np.linalg.norm(inst.b) > 0


def test_lasso_dist_bound_buffer():
    ds = I.sample_lasso_dataset(5, 7, 0.3, 1.0, 0.1, 0.5, {"train": 1}, seed=4, presolve_count=30)
    inst = ds.train[0]
    worst = 0.0
    for i in range(30):
        b = I._lasso_rhs(I._rng(4, I._PRESOLVE_CODE, i), inst.A, 1.0, 0.1, 0.5)
        ref = I.reference_optimum(I.LassoInstance(inst.A, b, 0.3, inst.x0, inst.smooth_L))
        worst = max(worst, np.linalg.norm(inst.x0 - ref.x_star))
    assert inst.dist_bound == pytest.approx(1.1 * worst, rel=1e-12)


def test_scalar_lasso_reference():
    inst = I.LassoInstance(np.array([[1.0]]), np.array([2.0]), 0.4, np.zeros(1), 1.0)
    ref = I.reference_optimum(inst)
    # independent oracle: 1-D minimization of 0.5 (x - 2)^2 + 0.4 |x|
    oracle = minimize_scalar(lambda x: 0.5 * (x - 2) ** 2 + 0.4 * abs(x), bounds=(-5, 5),
                             method="bounded", options={"xatol": 1e-12})
    assert ref.x_star[0] == pytest.approx(oracle.x, abs=1e-6)
    assert ref.x_star[0] == pytest.approx(1.6, abs=1e-12)
    assert ref.f_star == pytest.approx(0.72, abs=1e-12)
    assert ref.kkt_residual <= 1e-9


def test_lasso_reference_kkt(lasso_ds):
    for inst in lasso_ds.train:
        assert inst.reference.kkt_residual <= 1e-9


def test_lasso_invalid_lambda():
    with pytest.raises(I.InvalidInstance):
        I.LassoInstance(np.eye(2), np.zeros(2), 0.0, np.zeros(2), 1.0)


def test_tv_lp_counts():
    img = np.linspace(0, 1, 9).reshape(3, 3)
    inst = I.build_tv_lp(img, np.ones((3, 3), bool))
    assert inst.c.size == 9 + 2 * (2 * 2) == 17
    assert inst.A_eq.shape[0] == 9
    np.testing.assert_array_equal(inst.x0, 0.5)
    np.testing.assert_array_equal(inst.u0, 1.0)
    ref = I.reference_optimum(inst)
    np.testing.assert_allclose(ref.x_star[:9], img.ravel(), atol=1e-9)


def test_tv_mask_rounding_64():
    mask = I.random_mask(np.random.default_rng(0), (64, 64), 0.1)
    inst = I.build_tv_lp(np.zeros((64, 64)), mask)
    assert inst.A_eq.shape[0] == 3687


def test_tv_empty_mask_rejected():
    with pytest.raises(I.InvalidInstance):
        I.build_tv_lp(np.zeros((2, 2)), np.zeros((2, 2), bool))


def test_tv_lp_value_matches_direct_tv(rng):
    img = rng.uniform(size=(4, 5))
    mask = I.random_mask(rng, img.shape)
    inst = I.build_tv_lp(img, mask)
    U = rng.uniform(size=img.shape)
    U.ravel()[mask.ravel()] = img.ravel()[mask.ravel()]
    D = I.difference_operator(*img.shape)
    t = np.abs(D @ U.ravel())  # optimal slacks for this U
    x = np.concatenate([U.ravel(), t])
    assert np.all(inst.G_ineq @ x <= inst.h + 1e-12)
    assert np.allclose(inst.A_eq @ x, inst.b_eq)
    assert inst.c @ x == pytest.approx(I.tv_value(U), abs=1e-12)


def test_tv_dataset_invariants(tv_ds):
    for items in tv_ds.splits.values():
        for inst in items:
            assert I.spectral_norm(inst.M_stack) <= inst.M_max + 1e-12
            assert np.all(inst.x0 >= inst.lower) and np.all(inst.x0 <= inst.upper)
            assert inst.reference.kkt_residual <= 1e-9


def test_one_variable_lp_reference():
    e = sp.csr_matrix((0, 1))
    inst = I.TvLpInstance(c=np.ones(1), A_eq=e, b_eq=np.zeros(0), G_ineq=e, h=np.zeros(0),
                          lower=np.zeros(1), upper=np.ones(1), M_stack=e, x0=np.full(1, 0.5),
                          u0=np.zeros(0), shape=(1, 1), mask=np.ones((1, 1), bool), image=np.zeros((1, 1)))
    ref = I.reference_optimum(inst)
    assert ref.x_star[0] == pytest.approx(0.0, abs=1e-12)
    assert ref.f_star == pytest.approx(0.0, abs=1e-12)


def _pgm(tmp_path, value, binary):
    if binary:
        data = b"P5\n3 2\n255\n" + bytes([value] * 6)
    else:
        data = ("P2\n# comment\n3 2\n255\n" + " ".join([str(value)] * 6) + "\n").encode()
    p = tmp_path / f"img_{value}_{binary}.pgm"
    p.write_bytes(data)
    return p


@pytest.mark.parametrize("binary", [False, True])
def test_pgm_extremes(tmp_path, binary):
    np.testing.assert_array_equal(I.load_image_matrix(_pgm(tmp_path, 255, binary)), np.ones((2, 3)))
    np.testing.assert_array_equal(I.load_image_matrix(_pgm(tmp_path, 0, binary)), np.zeros((2, 3)))


def test_csv_grid(tmp_path):
    np.testing.assert_array_equal(I.parse_image_text("0,255;255,0"), [[0, 1], [1, 0]])
    p = tmp_path / "g.csv"
    p.write_text("0,255\n255,0\n")
    np.testing.assert_array_equal(I.load_image_matrix(p), [[0, 1], [1, 0]])


def test_color_image_split_per_channel(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n2 2\n255\n" + bytes(range(12)))
    img = I.load_image_matrix(p)
    assert img.shape == (2, 2, 3)
    ds = I.sample_tv_dataset([img, img * 0.5], {"train": 1, "val": 1}, seed=0)
    assert len(ds.train) == 3 and len(ds.val) == 3


def test_malformed_image_reports_position(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n2 2\n255\n0 1\nx 3\n")
    with pytest.raises(I.ImageParseError) as exc:
        I.load_image_matrix(p)
    assert exc.value.line == 5 and exc.value.byte == 15  # 0-based offset of "x"
    q = tmp_path / "bad.csv"
    q.write_text("0,1\n2,zz\n")
    with pytest.raises(I.ImageParseError) as exc:
        I.load_image_matrix(q)
    assert exc.value.line == 2


def test_grouped_split_keeps_groups_together():
    imgs = I.synthetic_images(8, (3, 3), seed=1)
    groups = [0, 0, 1, 1, 2, 2, 3, 3]
    ds = I.sample_tv_dataset(imgs, {"train": 2, "val": 1, "test": 1}, seed=1, groups=groups)
    owner = {}
    for split, items in ds.splits.items():
        for inst in items:
            g = groups[int(inst.uid.split(":img")[1])]
            assert owner.setdefault(g, split) == split


def test_save_load_roundtrip(tmp_path, lasso_ds):
    I.save_dataset(lasso_ds, tmp_path / "d")
    back = I.load_dataset(tmp_path / "d")
    assert back.sizes() == lasso_ds.sizes()
    for a, b in zip(lasso_ds.train, back.train):
        np.testing.assert_array_equal(a.b, b.b)
        assert a.reference.f_star == b.reference.f_star


def test_instances_are_frozen(quad_ds):
    with pytest.raises(dataclasses.FrozenInstanceError):
        quad_ds.train[0].mu = 2.0
