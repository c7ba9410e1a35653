"""Problem-instance families: sampling, construction, and reference optima.

Three families are supported:

* ``quadratic`` -- unconstrained ``(1/2) x'Qx`` with ``mu I <= Q <= L I`` and a
  random start on the radius-``R`` ball (solved by gradient descent),
* ``lasso`` -- ``(1/2)||Ax - b||^2 + lam ||x||_1`` with a shared dictionary
  (solved by ISTA),
* ``tv`` -- l1 total-variation inpainting cast as a standard-form LP
  (solved by PDHG).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

SPLITS = ("train", "val", "test", "test_ood")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}
_PRESOLVE_CODE = 97
_DICTIONARY_CODE = 99


class SamplerExhausted(RuntimeError):
    """Rejection sampling hit its attempt cap."""


class InvalidInstance(ValueError):
    pass


class CertificationUnavailable(RuntimeError):
    """A reference optimum could not be computed to the required accuracy."""


@dataclass(frozen=True, eq=False)
class Reference:
    """Reference optimum of one instance.

    ``u_star`` is only set for the LP family (dual solution of the saddle form).
    """

    x_star: np.ndarray
    f_star: float
    u_star: np.ndarray | None = None
    kkt_residual: float = 0.0


@dataclass(frozen=True, eq=False)
class QuadraticInstance:
    Q: np.ndarray
    x0: np.ndarray
    mu: float
    L: float
    R: float
    uid: str = ""
    reference: Reference | None = None

    family = "quadratic"

    @property
    def dim(self) -> int:
        return self.x0.shape[0]


@dataclass(frozen=True, eq=False)
class LassoInstance:
    A: np.ndarray
    b: np.ndarray
    lambda_reg: float
    x0: np.ndarray
    smooth_L: float
    dist_bound: float = np.inf
    uid: str = ""
    reference: Reference | None = None

    family = "lasso"

    def __post_init__(self):
        if not self.lambda_reg > 0:
            raise InvalidInstance("lambda_reg must be positive")

    def smooth_value(self, x):
        r = self.A @ x - self.b
        return 0.5 * float(r @ r)

    def smooth_grad(self, x):
        return self.A.T @ (self.A @ x - self.b)

    def l1_value(self, x):
        return self.lambda_reg * float(np.abs(x).sum())

    def objective(self, x):
        return self.smooth_value(x) + self.l1_value(x)


@dataclass(frozen=True, eq=False)
class TvLpInstance:
    """Standard-form LP ``min c'x s.t. A_eq x = b_eq, G x <= h, lower <= x <= upper``.

    The primal variable is ``x = (vec(U), t)`` with ``t`` the slacks bounding
    the absolute pixel differences. ``M_stack = [A_eq; -G_ineq]`` and the
    dual variable ``u`` has one entry per row of ``M_stack``; entries for the
    inequality rows are constrained to be nonnegative.
    """

    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    G_ineq: sp.csr_matrix
    h: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    M_stack: sp.csr_matrix
    x0: np.ndarray
    u0: np.ndarray
    shape: tuple[int, int]
    mask: np.ndarray
    image: np.ndarray
    M_max: float = np.inf
    dist_bound: float = np.inf
    uid: str = ""
    reference: Reference | None = None

    family = "tv"

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def q(self) -> np.ndarray:
        """Right-hand side paired with ``M_stack``: ``(b_eq, -h)``."""
        return np.concatenate([self.b_eq, -self.h])

    def project_primal(self, x):
        return np.clip(x, self.lower, self.upper)

    def project_dual(self, u):
        out = u.copy()
        out[self.n_eq:] = np.maximum(out[self.n_eq:], 0.0)
        return out

    def lagrangian(self, x, u):
        return float(self.c @ x - u @ (self.M_stack @ x - self.q))


Instance = QuadraticInstance | LassoInstance | TvLpInstance


@dataclass
class Dataset:
    family: str
    splits: dict[str, list]
    seed: int
    provenance: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, split: str) -> list:
        return self.splits[split]

    @property
    def train(self):
        return self.splits["train"]

    @property
    def val(self):
        return self.splits["val"]

    @property
    def test(self):
        return self.splits["test"]

    @property
    def test_ood(self):
        return self.splits["test_ood"]

    def sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}


def _normalize_sizes(sizes) -> dict[str, int]:
    if isinstance(sizes, int):
        sizes = {k: sizes for k in SPLITS}
    out = {k: int(sizes.get(k, 0)) for k in SPLITS}
    if any(v < 0 for v in out.values()):
        raise ValueError("split sizes must be nonnegative")
    return out


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, stream)])


# ---------------------------------------------------------------- quadratic

def _mp_shape(d: int, mu: float, L: float):
    """Aspect ratio and scale so the Marchenko-Pastur bulk is exactly [mu, L]."""
    s = (np.sqrt(L / mu) - 1.0) / (np.sqrt(L / mu) + 1.0)
    k = max(d, int(np.ceil(d / s**2)))
    lo = (1.0 - np.sqrt(d / k)) ** 2
    hi = (1.0 + np.sqrt(d / k)) ** 2
    a = (L - mu) / (hi - lo)
    return k, a, mu - a * lo


def sample_spd_matrix(rng, d, mu, L, max_attempts=1000):
    """Draw ``Q`` from a rescaled Wishart (Marchenko-Pastur) ensemble.

    Samples whose spectrum leaves ``[mu, L]`` are rejected.
    """
    if mu == L:
        return mu * np.eye(d)
    k, a, shift = _mp_shape(d, mu, L)
    for _ in range(max_attempts):
        B = rng.standard_normal((k, d))
        Q = a * (B.T @ B) / k + shift * np.eye(d)
        Q = 0.5 * (Q + Q.T)
        ev = np.linalg.eigvalsh(Q)
        if ev[0] >= mu and ev[-1] <= L:
            return Q
    raise SamplerExhausted(
        f"no sample with spectrum in [{mu}, {L}] after {max_attempts} attempts (d={d})"
    )


def sample_ball(rng, d, R):
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    return R * rng.uniform() ** (1.0 / d) * v


def sample_quadratic_dataset(d, mu, L, R, sizes, seed, L_ood=None, max_attempts=1000):
    """Quadratic dataset; the out-of-distribution split uses smoothness ``L_ood``."""
    if d < 1 or not (0 < mu <= L) or R <= 0:
        raise ValueError("need d >= 1, 0 < mu <= L, R > 0")
    L_ood = L if L_ood is None else L_ood
    if L_ood < mu:
        raise ValueError("L_ood must be >= mu")
    sizes = _normalize_sizes(sizes)
    splits = {}
    for split in SPLITS:
        Lc = L_ood if split == "test_ood" else L
        items = []
        for i in range(sizes[split]):
            rng = _rng(seed, _SPLIT_CODE[split], i)
            Q = sample_spd_matrix(rng, d, mu, Lc, max_attempts)
            x0 = sample_ball(rng, d, R)
            inst = QuadraticInstance(Q=Q, x0=x0, mu=mu, L=Lc, R=R, uid=f"{split}/{i}")
            items.append(dataclasses.replace(inst, reference=reference_optimum(inst)))
        splits[split] = items
    prov = dict(sampler="quadratic", d=d, mu=mu, L=L, R=R, L_ood=L_ood,
                sizes=sizes, max_attempts=max_attempts)
    return Dataset("quadratic", splits, int(seed), prov)


# ---------------------------------------------------------------- lasso

def sample_dictionary(rng, m, n):
    A = rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, n))
    return A / np.linalg.norm(A, axis=0, keepdims=True)


def _lasso_rhs(rng, A, sigma_x, sigma_err, p_mask):
    m, n = A.shape
    keep = rng.uniform(size=n) < p_mask
    x_true = np.where(keep, rng.normal(0.0, sigma_x, size=n), 0.0)
    return A @ x_true + rng.normal(0.0, sigma_err, size=m)


def sample_lasso_dataset(m, n, lambda_reg, sigma_x, sigma_err, p_mask, sizes, seed,
                         sigma_x_ood=None, presolve_count=1000, buffer=1.1):
    """LASSO dataset with a dictionary shared by every split.

    ``dist_bound`` is ``buffer`` times the largest ``||x0 - x*||`` over a
    separate pre-solve set drawn from the in-distribution sampler.
    """
    if m < 1 or n < 1 or lambda_reg <= 0 or sigma_x < 0 or sigma_err < 0:
        raise ValueError("invalid LASSO sampler parameters")
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError("p_mask must lie in [0, 1]")
    sigma_x_ood = sigma_x if sigma_x_ood is None else sigma_x_ood
    sizes = _normalize_sizes(sizes)
    A = sample_dictionary(_rng(seed, _DICTIONARY_CODE), m, n)
    smooth_L = float(np.linalg.eigvalsh(A.T @ A)[-1])
    x0 = np.zeros(n)

    dist = 0.0
    for i in range(presolve_count):
        b = _lasso_rhs(_rng(seed, _PRESOLVE_CODE, i), A, sigma_x, sigma_err, p_mask)
        ref = reference_optimum(LassoInstance(A, b, lambda_reg, x0, smooth_L))
        dist = max(dist, float(np.linalg.norm(x0 - ref.x_star)))
    dist_bound = buffer * dist

    splits = {}
    for split in SPLITS:
        sx = sigma_x_ood if split == "test_ood" else sigma_x
        items = []
        for i in range(sizes[split]):
            b = _lasso_rhs(_rng(seed, _SPLIT_CODE[split], i), A, sx, sigma_err, p_mask)
            inst = LassoInstance(A, b, lambda_reg, x0, smooth_L, dist_bound, uid=f"{split}/{i}")
            items.append(dataclasses.replace(inst, reference=reference_optimum(inst)))
        splits[split] = items
    prov = dict(sampler="lasso", m=m, n=n, lambda_reg=lambda_reg, sigma_x=sigma_x,
                sigma_x_ood=sigma_x_ood, sigma_err=sigma_err, p_mask=p_mask, sizes=sizes,
                presolve_count=presolve_count, buffer=buffer, smooth_L=smooth_L,
                dist_bound=dist_bound)
    return Dataset("lasso", splits, int(seed), prov)


def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _lasso_kkt(inst, x):
    return float(np.max(np.abs(x - soft_threshold(x - inst.smooth_grad(x), inst.lambda_reg)),
                        initial=0.0))


def _lasso_polish(inst, x):
    """Solve the KKT system on the current support and sign pattern."""
    S = np.flatnonzero(x)
    if S.size == 0:
        return np.zeros_like(x)
    AS = inst.A[:, S]
    H = AS.T @ AS
    if np.linalg.cond(H) > 1e12:
        return None
    xs = np.linalg.solve(H, AS.T @ inst.b - inst.lambda_reg * np.sign(x[S]))
    if np.any(np.sign(xs) != np.sign(x[S])):
        return None
    out = np.zeros_like(x)
    out[S] = xs
    return out


def _solve_lasso(inst, tol=1e-9, max_iter=10**6, check_every=25):
    step = 1.0 / inst.smooth_L
    x = inst.x0.astype(float).copy()
    for it in range(max_iter):
        x = soft_threshold(x - step * inst.smooth_grad(x), step * inst.lambda_reg)
        if it % check_every == 0:
            if _lasso_kkt(inst, x) <= tol:
                return x
            xp = _lasso_polish(inst, x)
            if xp is not None and _lasso_kkt(inst, xp) <= tol:
                return xp
    raise CertificationUnavailable(f"ISTA reference solve did not reach KKT residual {tol}")


# ---------------------------------------------------------------- tv inpainting

def difference_operator(m, n):
    """Stack of vertical then horizontal forward differences over the (m-1)x(n-1) grid."""
    idx = np.arange(m * n).reshape(m, n)
    base = idx[:-1, :-1].ravel()
    down = idx[1:, :-1].ravel()
    right = idx[:-1, 1:].ravel()
    k = base.size
    rows = np.concatenate([np.arange(k), np.arange(k), k + np.arange(k), k + np.arange(k)])
    cols = np.concatenate([down, base, right, base])
    vals = np.concatenate([np.ones(k), -np.ones(k), np.ones(k), -np.ones(k)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * k, m * n))


def build_tv_lp(image, mask, uid=""):
    """Standard-form LP for l1 total-variation inpainting.

    ``mask`` is a boolean array, True on the known pixels.
    """
    image = np.asarray(image, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if image.ndim != 2 or mask.shape != image.shape:
        raise InvalidInstance("image must be 2-D and match the mask shape")
    if not mask.any():
        raise InvalidInstance("mask has no known pixels")
    if image.min() < 0.0 or image.max() > 1.0:
        raise InvalidInstance("image values must lie in [0, 1]")
    m, n = image.shape
    N = m * n
    D = difference_operator(m, n)
    T = D.shape[0]
    known = np.flatnonzero(mask.ravel())
    E = sp.csr_matrix((np.ones(known.size), (np.arange(known.size), known)), shape=(known.size, N))
    A_eq = sp.hstack([E, sp.csr_matrix((known.size, T))], format="csr")
    b_eq = image.ravel()[known]
    I = sp.identity(T, format="csr")
    G = sp.vstack([sp.hstack([D, -I]), sp.hstack([-D, -I])], format="csr")
    h = np.zeros(2 * T)
    c = np.concatenate([np.zeros(N), np.ones(T)])
    lower = np.zeros(N + T)
    upper = np.concatenate([np.ones(N), np.full(T, np.inf)])
    M = sp.vstack([A_eq, -G], format="csr")
    x0 = np.full(N + T, 0.5)
    u0 = np.ones(M.shape[0])
    return TvLpInstance(c=c, A_eq=A_eq, b_eq=b_eq, G_ineq=G, h=h, lower=lower, upper=upper,
                        M_stack=M, x0=x0, u0=u0, shape=(m, n), mask=mask, image=image, uid=uid)


def tv_value(U):
    """Direct anisotropic TV objective of the inpainting problem."""
    U = np.asarray(U, dtype=float)
    dv = U[1:, :-1] - U[:-1, :-1]
    dh = U[:-1, 1:] - U[:-1, :-1]
    return float(np.abs(dv).sum() + np.abs(dh).sum())


def random_mask(rng, shape, missing_fraction=0.1):
    """Known-pixel mask with ``floor(missing_fraction * m * n)`` pixels removed."""
    N = int(np.prod(shape))
    drop = int(np.floor(missing_fraction * N))
    mask = np.ones(N, dtype=bool)
    mask[rng.choice(N, size=drop, replace=False)] = False
    return mask.reshape(shape)


def spectral_norm(M) -> float:
    if min(M.shape) <= 200:
        return float(np.linalg.norm(M.toarray() if sp.issparse(M) else M, 2))
    from scipy.sparse.linalg import svds
    return float(svds(sp.csr_matrix(M), k=1, return_singular_vectors=False)[0])


def _split_channels(images):
    out = []
    for name, img in images:
        img = np.asarray(img, dtype=float)
        if img.ndim == 3:
            out.extend((f"{name}:c{c}", img[..., c]) for c in range(img.shape[2]))
        else:
            out.append((name, img))
    return out


def sample_tv_dataset(images, sizes, seed, ood_images=None, groups=None,
                      missing_fraction=0.1, buffer=1.1):
    """TV-inpainting dataset from in-memory images.

    ``images`` is a sequence of 2-D arrays (or ``(name, array)`` pairs) in [0, 1];
    color arrays ``(m, n, 3)`` become one LP per channel. When ``groups`` is
    given, whole groups are assigned to splits so no group straddles two
    partitions. ``ood_images`` feed the out-of-distribution split.
    """
    sizes = _normalize_sizes(sizes)
    named = [im if isinstance(im, tuple) else (f"img{i}", im) for i, im in enumerate(images)]
    rng = _rng(seed, 0)
    order = _assign_splits(rng, len(named), sizes, groups)
    splits = {s: [] for s in SPLITS}
    for split in ("train", "val", "test"):
        chosen = [named[i] for i in order[split]]
        for j, (name, img) in enumerate(_split_channels(chosen)):
            mask = random_mask(_rng(seed, _SPLIT_CODE[split], j), img.shape, missing_fraction)
            splits[split].append(build_tv_lp(img, mask, uid=f"{split}/{j}:{name}"))
    ood = list(ood_images or [])
    ood = [im if isinstance(im, tuple) else (f"ood{i}", im) for i, im in enumerate(ood)]
    for j, (name, img) in enumerate(_split_channels(ood[: sizes["test_ood"] or len(ood)])):
        mask = random_mask(_rng(seed, _SPLIT_CODE["test_ood"], j), img.shape, missing_fraction)
        splits["test_ood"].append(build_tv_lp(img, mask, uid=f"test_ood/{j}:{name}"))

    with_ref = {s: [dataclasses.replace(x, reference=reference_optimum(x)) for x in items]
                for s, items in splits.items()}
    all_items = [x for items in with_ref.values() for x in items]
    M_max = max((spectral_norm(x.M_stack) for x in all_items), default=np.inf)
    # every split used for fitting or model selection must lie inside the class
    presolve = (with_ref["train"] + with_ref["val"]) or all_items
    dist = max((_tv_distance(x) for x in presolve), default=0.0)
    dist_bound = buffer * dist
    final = {s: [dataclasses.replace(x, M_max=M_max, dist_bound=dist_bound) for x in items]
             for s, items in with_ref.items()}
    prov = dict(sampler="tv", sizes={k: len(v) for k, v in final.items()},
                missing_fraction=missing_fraction, buffer=buffer, M_max=M_max,
                dist_bound=dist_bound, grouped=groups is not None,
                image_names=[nm for nm, _ in named], ood_names=[nm for nm, _ in ood])
    return Dataset("tv", final, int(seed), prov)


def _assign_splits(rng, count, sizes, groups):
    if groups is None:
        perm = rng.permutation(count)
        a, b, c = sizes["train"], sizes["val"], sizes["test"]
        if a + b + c > count:
            raise ValueError(f"requested {a + b + c} images but only {count} available")
        return {"train": perm[:a], "val": perm[a:a + b], "test": perm[a + b:a + b + c]}
    groups = np.asarray(groups)
    labels = rng.permutation(np.unique(groups))
    a, b, c = sizes["train"], sizes["val"], sizes["test"]
    if a + b + c > labels.size:
        raise ValueError("split sizes count groups when groups are given")
    pick = {"train": labels[:a], "val": labels[a:a + b], "test": labels[a + b:a + b + c]}
    return {s: np.flatnonzero(np.isin(groups, g)) for s, g in pick.items()}


def _tv_distance(inst):
    ref = inst.reference
    return float(np.sqrt(np.sum((inst.x0 - ref.x_star) ** 2) + np.sum((inst.u0 - ref.u_star) ** 2)))


def synthetic_images(count, shape, seed):
    """Smooth random images in [0, 1] (sums of a few Gaussian blobs)."""
    rng = _rng(seed, 12345)
    m, n = shape
    yy, xx = np.mgrid[0:m, 0:n]
    out = []
    for _ in range(count):
        img = np.zeros(shape)
        for _ in range(3):
            cy, cx = rng.uniform(0, m), rng.uniform(0, n)
            w = rng.uniform(0.2, 0.6) * max(m, n)
            img += rng.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / w**2)
        img -= img.min()
        if img.max() > 0:
            img /= img.max()
        out.append(np.round(img * 255) / 255)
    return out


def _solve_tv(inst, tol=1e-9):
    A_ub = inst.G_ineq
    bounds = list(zip(inst.lower, [None if np.isinf(u) else u for u in inst.upper]))
    res = linprog(inst.c, A_ub=A_ub, b_ub=inst.h, A_eq=inst.A_eq, b_eq=inst.b_eq,
                  bounds=bounds, method="highs")
    if res.status != 0:
        raise CertificationUnavailable(f"LP reference solve failed: {res.message}")
    x = np.clip(res.x, inst.lower, inst.upper)
    u = np.concatenate([res.eqlin.marginals, -res.ineqlin.marginals])
    u = inst.project_dual(u)
    gap = _tv_gap(inst, x, u)
    if gap > tol * (1.0 + abs(float(inst.c @ x))):
        raise CertificationUnavailable(f"LP reference duality gap {gap:.3e} exceeds {tol}")
    return x, u, gap


def _tv_gap(inst, x, u):
    """KKT error of ``(x, u)``: objective gap plus primal and dual infeasibility."""
    reduced = inst.c - inst.M_stack.T @ u
    free_up = np.isinf(inst.upper)
    # min over the box of reduced'x, with unbounded columns treated separately
    corner = np.where(reduced >= 0, inst.lower, np.where(free_up, inst.lower, inst.upper))
    dual = float(inst.q @ u + reduced @ corner)
    dual_infeas = float(np.maximum(-reduced[free_up], 0.0).sum())
    r = inst.M_stack @ x - inst.q
    primal_infeas = float(np.abs(r[: inst.n_eq]).max(initial=0.0)
                          + np.maximum(-r[inst.n_eq:], 0.0).max(initial=0.0))
    return abs(float(inst.c @ x) - dual) + primal_infeas + dual_infeas


# ---------------------------------------------------------------- reference optima

def reference_optimum(instance, tol=1e-9) -> Reference:
    """High-accuracy optimum used for losses and lifting."""
    if instance.reference is not None:
        return instance.reference
    if isinstance(instance, QuadraticInstance):
        return Reference(np.zeros(instance.dim), 0.0)
    if isinstance(instance, LassoInstance):
        x = _solve_lasso(instance, tol)
        return Reference(x, instance.objective(x), kkt_residual=_lasso_kkt(instance, x))
    if isinstance(instance, TvLpInstance):
        x, u, gap = _solve_tv(instance, tol)
        return Reference(x, float(instance.c @ x), u_star=u, kkt_residual=gap)
    raise TypeError(f"unknown instance type {type(instance).__name__}")


def with_reference(instance):
    if instance.reference is not None:
        return instance
    return dataclasses.replace(instance, reference=reference_optimum(instance))


def dataset_from_instances(family, splits: dict[str, Sequence], seed=0, provenance=None):
    """Wrap hand-built instances as a dataset (references filled in)."""
    full = {s: [with_reference(x) for x in splits.get(s, [])] for s in SPLITS}
    return Dataset(family, full, seed, dict(provenance or {}))


# ---------------------------------------------------------------- image files

class ImageParseError(ValueError):
    """Malformed image file; ``line`` and ``byte`` locate the problem when known."""

    def __init__(self, message, path=None, line=None, byte=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if byte is not None:
            where.append(f"byte {byte}")
        loc = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{path or '<image>'}{loc}: {message}")
        self.path, self.line, self.byte = path, line, byte


def _pnm_tokens(data: bytes, count, start, path):
    """Read ``count`` whitespace-separated header/ASCII tokens, skipping comments."""
    tokens = []
    pos = start
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise ImageParseError("unexpected end of file", path, data.count(b"\n", 0, pos) + 1, pos)
        begin = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tok = data[begin:pos]
        try:
            tokens.append(int(tok))
        except ValueError:
            raise ImageParseError(f"expected an integer, got {tok[:20]!r}", path,
                                  data.count(b"\n", 0, begin) + 1, begin) from None
    return tokens, pos


def _parse_pnm(data: bytes, path):
    magic = data[:2]
    channels = {b"P2": 1, b"P5": 1, b"P3": 3, b"P6": 3}.get(magic)
    if channels is None:
        raise ImageParseError(f"unsupported magic number {magic!r}", path, 1, 0)
    (width, height, maxval), pos = _pnm_tokens(data, 3, 2, path)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageParseError("invalid width/height/maxval", path, 1, 0)
    count = width * height * channels
    if magic in (b"P2", b"P3"):
        vals, _ = _pnm_tokens(data, count, pos, path)
        arr = np.asarray(vals, dtype=float)
    else:
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        if len(data) - pos < need:
            raise ImageParseError(f"raster truncated: need {need} bytes, have {len(data) - pos}",
                                  path, None, len(data))
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(float)
    if np.any(arr > maxval):
        raise ImageParseError("sample exceeds maxval", path)
    arr = arr / maxval
    return arr.reshape(height, width, channels) if channels == 3 else arr.reshape(height, width)


def _parse_csv(text: str, path):
    rows = []
    line_no = 1
    for chunk in text.replace("\r\n", "\n").split("\n"):
        for row in chunk.split(";"):
            row = row.strip()
            if not row:
                continue
            try:
                rows.append([float(v) for v in row.split(",")])
            except ValueError:
                raise ImageParseError(f"non-numeric entry in row {row[:40]!r}", path, line_no) from None
        line_no += 1
    if not rows:
        raise ImageParseError("empty grid", path, 1)
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise ImageParseError(f"ragged grid: row {i + 1} has {len(r)} entries, expected {width}", path)
    arr = np.asarray(rows, dtype=float)
    if arr.min() < 0 or arr.max() > 255:
        raise ImageParseError("CSV values must lie in [0, 255]", path)
    return arr / 255.0


def load_image_matrix(path):
    """Load a PGM/PPM (P2, P3, P5, P6) or numeric CSV image scaled to [0, 1].

    Color images come back as ``(m, n, 3)``; datasets split them into one
    grayscale problem per channel.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:1] == b"P" and data[1:2] in (b"2", b"3", b"5", b"6"):
        return _parse_pnm(data, str(path))
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ImageParseError("not ASCII CSV", str(path), data.count(b"\n", 0, exc.start) + 1,
                              exc.start) from None
    return _parse_csv(text, str(path))


def parse_image_text(text: str):
    """CSV grid given inline, e.g. ``"0,255;255,0"``."""
    return _parse_csv(text, None)


# ---------------------------------------------------------------- persistence

_SCALARS = {
    "quadratic": ("mu", "L", "R"),
    "lasso": ("lambda_reg", "smooth_L", "dist_bound"),
    "tv": ("M_max", "dist_bound"),
}
_ARRAYS = {
    "quadratic": ("Q", "x0"),
    "lasso": ("b", "x0"),
    "tv": ("image", "mask"),
}


def save_dataset(dataset: Dataset, directory):
    """Write ``manifest.json`` plus ``arrays.npz`` into ``directory``."""
    import json
    import os

    os.makedirs(directory, exist_ok=True)
    arrays = {}
    entries = {}
    fam = dataset.family
    for split, items in dataset.splits.items():
        rows = []
        for i, inst in enumerate(items):
            key = f"{split}/{i}"
            for name in _ARRAYS[fam]:
                arrays[f"{key}/{name}"] = np.asarray(getattr(inst, name))
            ref = inst.reference
            if ref is not None:
                arrays[f"{key}/x_star"] = ref.x_star
                if ref.u_star is not None:
                    arrays[f"{key}/u_star"] = ref.u_star
            rows.append(dict(uid=inst.uid, f_star=None if ref is None else ref.f_star,
                             kkt_residual=None if ref is None else ref.kkt_residual,
                             **{s: float(getattr(inst, s)) for s in _SCALARS[fam]}))
        entries[split] = rows
    if fam == "lasso" and any(dataset.splits.values()):
        first = next(items[0] for items in dataset.splits.values() if items)
        arrays["A"] = first.A
    np.savez(os.path.join(directory, "arrays.npz"), **arrays)
    manifest = dict(format="drl2o-dataset/1", family=fam, seed=dataset.seed,
                    provenance=dataset.provenance, instances=entries)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def load_dataset(directory) -> Dataset:
    import json
    import os

    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    fam = manifest["family"]
    with np.load(os.path.join(directory, "arrays.npz")) as npz:
        arrays = {k: npz[k] for k in npz.files}
    splits = {}
    for split, rows in manifest["instances"].items():
        items = []
        for i, row in enumerate(rows):
            key = f"{split}/{i}"
            ref = None
            if row["f_star"] is not None:
                ref = Reference(arrays[f"{key}/x_star"], row["f_star"], arrays.get(f"{key}/u_star"),
                                row["kkt_residual"] or 0.0)
            if fam == "quadratic":
                inst = QuadraticInstance(arrays[f"{key}/Q"], arrays[f"{key}/x0"], row["mu"],
                                         row["L"], row["R"], uid=row["uid"], reference=ref)
            elif fam == "lasso":
                inst = LassoInstance(arrays["A"], arrays[f"{key}/b"], row["lambda_reg"],
                                     arrays[f"{key}/x0"], row["smooth_L"], row["dist_bound"],
                                     uid=row["uid"], reference=ref)
            else:
                inst = build_tv_lp(arrays[f"{key}/image"], arrays[f"{key}/mask"], uid=row["uid"])
                inst = dataclasses.replace(inst, M_max=row["M_max"], dist_bound=row["dist_bound"],
                                           reference=ref)
            items.append(inst)
        splits[split] = items
    return Dataset(fam, splits, manifest["seed"], manifest["provenance"])
