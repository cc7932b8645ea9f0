"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v``; the summary of all
criteria is printed at the end of the session.
"""

import time

import numpy as np
import pytest

from kymorecon.conditioning import (
    assemble_point_source_matrix,
    default_motivation_psf,
    motivation_grid,
    rcn,
    run_error_sweep,
    run_rcn_sweep,
)
from kymorecon.experiments import (
    DEFAULT_BIN_SIZES,
    DEFAULT_LAMBDAS,
    DEFAULT_RCN_BIN_SIZES,
    bin_sweep,
    gm1_curve,
    lambda_sweep,
    nn_error,
    psnr_sweep,
    simulate_scenario,
)
from kymorecon.io import ExperimentConfig
from kymorecon.microscope import (
    CameraModel,
    PsfModel,
    build_system,
    expected_counts,
    grey_to_photons,
    photons_to_grey,
    psf_eval,
)
from kymorecon.solver import (
    SolverConfig,
    innovation_prox,
    likelihood_prox,
    positivity_project,
    run_map,
)

SEED = 1


@pytest.fixture(scope="module")
def config():
    return ExperimentConfig()


@pytest.fixture(scope="module")
def island_sweep(config):
    """Line geometry with island photometry, swept over lambda and bin size."""
    data = simulate_scenario("gm1", "pm2", config, seed=SEED)
    t0 = time.perf_counter()
    rows = lambda_sweep(data, DEFAULT_LAMBDAS, DEFAULT_BIN_SIZES)
    return data, rows, time.perf_counter() - t0


def _by_bin(rows, delta):
    sel = [r for r in rows if np.isclose(r["bin_size_um"], delta)]
    return sorted(sel, key=lambda r: r["lambda"])


# ---------------------------------------------------------------- 1


def test_criterion_01_point_source_exactness(report):
    t0 = time.perf_counter()
    psf, grid = default_motivation_psf(4.0), motivation_grid(64)
    px = grid.pixel_size
    centre = np.array([32.5, 32.5]) * px

    coincident = rcn(assemble_point_source_matrix([centre, centre], psf, grid).M)
    separated = rcn(assemble_point_source_matrix([centre, centre + [8 * px, 0.0]], psf, grid).M)
    # a pixel-centred source next to a corner-centred one: disjoint supports, unequal norms
    M = assemble_point_source_matrix([centre, centre + [10.5 * px, 9.5 * px]], psf, grid).M
    norms = np.linalg.norm(M, axis=0)
    disjoint = not np.any((M[:, 0] > 0) & (M[:, 1] > 0))
    ratio_gap = abs(rcn(M) - norms.min() / norms.max())
    elapsed = time.perf_counter() - t0

    ok = (coincident < 1e-12 and abs(separated - 1.0) <= 1e-10 and disjoint
          and ratio_gap <= 1e-10 and elapsed < 10)
    report("C1 point-source exactness", ok,
           f"coincident={coincident:.1e} separated-1={separated - 1:.1e} "
           f"norm-ratio gap={ratio_gap:.1e} t={elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_02_rcn_sweep_trends(report):
    t0 = time.perf_counter()
    counts = [1, 2, 4, 8, 16, 32, 64]
    psf, grid = default_motivation_psf(4.0), motivation_grid(64)
    rows = run_rcn_sweep([0.5, 2.0, 8.0], counts, psf, grid)
    elapsed = time.perf_counter() - t0
    at8 = [r["rcn"] for r in rows if r["radius_px"] == 8.0]
    non_increasing = all(b <= a for a, b in zip(at8, at8[1:]))

    # sources on the ring sit at different sub-pixel offsets, so for disjoint
    # supports the value is the column-norm ratio, which is 1 up to sampling ripple
    from kymorecon.conditioning import _grid_centre, roots_of_unity_sources

    identity_gaps, ones = [], []
    for c, value in zip(counts, at8):
        if c > 8:
            continue
        M = assemble_point_source_matrix(roots_of_unity_sources(c - 1, 8.0, _grid_centre(grid), grid.pixel_size),
                                         psf, grid).M
        norms = np.linalg.norm(M, axis=0)
        identity_gaps.append(abs(value - norms.min() / norms.max()))
        ones.append(abs(value - 1.0))
    unity = max(identity_gaps) <= 1e-10 and max(ones) <= 1e-2

    count8 = {r["radius_px"]: r["rcn"] for r in rows if r["n_sources"] == 8}
    ordered = count8[0.5] < count8[2.0] < count8[8.0]
    ok = non_increasing and unity and ordered and elapsed < 60
    report("C2 rcn sweep trends", ok,
           f"radius8={np.round(at8, 5).tolist()} max|rcn-1|(<=8)={max(ones):.1e} "
           f"count8={count8} t={elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_03_error_sweep_trend(report):
    t0 = time.perf_counter()
    psf, grid = default_motivation_psf(4.0), motivation_grid(64)
    rows = run_error_sweep([0.5], [1, 2, 4, 8], repeats=20, psf=psf, grid=grid,
                           mu_bg=10.0, phi_true=400.0, seed=SEED)
    errs = [r["median_l2_error"] for r in rows]
    monotone = all(b > a for a, b in zip(errs, errs[1:]))
    clean = run_error_sweep([8.0], [8], psf=psf, grid=grid, mu_bg=10.0, phi_true=400.0, noiseless=True)
    clean_err = clean[0]["median_l2_error"]
    elapsed = time.perf_counter() - t0
    ok = monotone and clean_err < 1e-3 and elapsed < 300
    report("C3 error sweep trend", ok,
           f"medians={np.round(errs, 4).tolist()} noiseless={clean_err:.1e} t={elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 4


def _small_instance(seed):
    rng = np.random.default_rng(seed)
    n_b = int(rng.integers(3, 9))
    H = rng.uniform(0, 1, (25, n_b)) * (rng.uniform(size=(25, n_b)) < 0.7)
    phi = rng.uniform(0, 10, n_b) * (rng.uniform(size=n_b) < 0.8)
    bg = float(rng.uniform(0.5, 2.0))
    counts = rng.poisson(bg + H @ phi).astype(float)
    family = ("laplace", "gaussian")[seed % 2]
    lam = float(10 ** rng.uniform(-1, 1))
    return H, counts, bg, family, lam


def _batched_subgradient_oracle(instances, iters=100_000):
    """Projected normalised subgradient descent on all instances at once.

    Written independently of the package: plain I-divergence, explicit
    difference operator, step ``1 / sqrt(k + 1)``; the best iterate is kept.
    """
    n_inst, n_max = len(instances), max(inst[0].shape[1] for inst in instances)
    n_p = instances[0][0].shape[0]
    H = np.zeros((n_inst, n_p, n_max))
    D = np.zeros((n_inst, n_max, n_max))
    mask = np.zeros((n_inst, n_max))
    counts = np.zeros((n_inst, n_p))
    bg, lam, n_b, lap = (np.zeros(n_inst) for _ in range(4))
    for i, (h, n, b, fam, la) in enumerate(instances):
        k = h.shape[1]
        H[i, :, :k] = h
        D[i, :k, :k] = np.eye(k) - np.eye(k, k=-1)
        mask[i, :k] = 1.0
        counts[i], bg[i], lam[i], n_b[i], lap[i] = n, b, la, k, fam == "laplace"
    HT = np.transpose(H, (0, 2, 1))
    DT = np.transpose(D, (0, 2, 1))
    pos = counts > 0
    log_n = np.where(pos, np.log(np.where(pos, counts, 1.0)), 0.0)

    def value(phi):
        r = bg[:, None] + np.einsum("ipk,ik->ip", H, phi)
        u = np.einsum("ijk,ik->ij", D, phi)
        nll = np.sum(np.where(pos, counts * (log_n - np.log(r)), 0.0) + r - counts, axis=1) / n_p
        pot = np.where(lap, np.sum(np.abs(u), axis=1), np.sum(u * u, axis=1))
        return nll + lam * pot / n_b, r, u

    phi = mask.copy()
    best = np.full(n_inst, np.inf)
    for k in range(iters):
        f, r, u = value(phi)
        best = np.minimum(best, f)
        g_prior = np.where(lap[:, None], np.sign(u), 2.0 * u)
        g = (np.einsum("ikp,ip->ik", HT, 1.0 - counts / r) / n_p
             + (lam / n_b)[:, None] * np.einsum("ikj,ij->ik", DT, g_prior))
        g = np.where((phi <= 0) & (g > 0), 0.0, g) * mask
        gn = np.linalg.norm(g, axis=1)
        step = np.where(gn > 0, 1.0 / (np.sqrt(k + 1.0) * np.maximum(gn, 1e-300)), 0.0)
        phi = np.maximum(phi - step[:, None] * g, 0.0)
    return np.minimum(best, value(phi)[0])


def _independent_objective(phi, H, counts, bg, family, lam):
    r = bg + H @ phi
    u = np.diff(np.concatenate([[0.0], phi]))
    pos = counts > 0
    nll = np.sum(np.where(pos, counts * np.log(np.where(pos, counts, 1.0) / r), 0.0) + r - counts) / len(counts)
    pot = np.sum(np.abs(u)) if family == "laplace" else np.sum(u * u)
    return nll + lam * pot / len(phi)


def test_criterion_04_solver_matches_oracle(report):
    t0 = time.perf_counter()
    instances = [_small_instance(s) for s in range(25)]
    oracle = _batched_subgradient_oracle(instances)
    gaps = []
    for (H, counts, bg, family, lam), ref in zip(instances, oracle):
        phi, _ = run_map(counts, H, bg, config=SolverConfig(lam=lam, prior=family, max_iters=20000, rel_tol=1e-10),
                         record=False)
        gaps.append(abs(_independent_objective(phi, H, counts, bg, family, lam) - ref) / abs(ref))
    elapsed = time.perf_counter() - t0
    ok = max(gaps) <= 1e-3 and elapsed < 120
    report("C4 solver vs subgradient oracle", ok, f"max rel gap={max(gaps):.1e} over 25 instances t={elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_05_proximal_correctness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    n = 100_000
    s = rng.uniform(-50, 200, n)
    counts = np.where(rng.uniform(size=n) < 0.1, 0.0, rng.uniform(0, 200, n))
    tau = 10 ** rng.uniform(-3, 2, n)
    w = likelihood_prox(s, counts, tau)
    residual = np.abs(w * w + w * (tau - s) - tau * counts)
    root_ok = bool(np.all(w >= 0)) and float(residual.max()) < 1e-9

    grid_errors = {}
    for family in ("laplace", "gaussian"):
        worst = 0.0
        for v, t in zip(rng.uniform(-5, 5, 200), rng.uniform(0, 2, 200)):
            x = np.arange(-6.0, 6.0 + 1e-4, 1e-4)
            pot = np.abs(x) if family == "laplace" else x * x
            xs = x[np.argmin(0.5 * (x - v) ** 2 + t * pot)]
            worst = max(worst, abs(float(innovation_prox(v, family, t)) - xs))
        grid_errors[family] = worst
    prox_ok = all(e <= 1e-4 for e in grid_errors.values())

    vecs = rng.normal(size=(10_000, 16)) * 5
    other = rng.normal(size=(10_000, 16)) * 5
    p = positivity_project(vecs)
    idempotent = np.array_equal(positivity_project(p), p)
    nonexpansive = bool(np.all(np.linalg.norm(p - positivity_project(other), axis=1)
                               <= np.linalg.norm(vecs - other, axis=1) + 1e-12))
    elapsed = time.perf_counter() - t0
    ok = root_ok and prox_ok and idempotent and nonexpansive and elapsed < 30
    report("C5 proximal correctness", ok,
           f"max root residual={residual.max():.1e} grid err={grid_errors} "
           f"idempotent={idempotent} nonexpansive={nonexpansive} t={elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 6


def test_criterion_06_v_shape(island_sweep, report):
    _, rows, elapsed = island_sweep
    argmins, interior = [], []
    for delta in DEFAULT_BIN_SIZES:
        errs = [r["l1_error"] for r in _by_bin(rows, delta)]
        i = int(np.argmin(errs))
        argmins.append(DEFAULT_LAMBDAS[i])
        interior.append(0 < i < len(errs) - 1 and errs[i] < errs[i - 1] and errs[i] < errs[i + 1])
    ok = all(interior) and len(set(argmins)) == 1 and elapsed < 600
    table = {d: [round(r["l1_error"], 1) for r in _by_bin(rows, d)] for d in DEFAULT_BIN_SIZES}
    report("C6 V-shaped lambda sweep", ok, f"argmin lambda per bin={argmins} errors={table} t={elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_07_conditioning_improvement(config, report):
    t0 = time.perf_counter()
    rows = bin_sweep(gm1_curve(), config, DEFAULT_RCN_BIN_SIZES)
    elapsed = time.perf_counter() - t0
    hth = np.array([r["rcn_hth"] for r in rows])
    ata = np.array([r["rcn_ata"] for r in rows])
    ok = (bool(np.all(ata >= hth)) and ata.max() / ata.min() < 10
          and (hth.min() == 0 or hth.max() / hth.min() > 10) and elapsed < 120)
    report("C7 conditioning improvement", ok,
           f"rcn(HtH)={np.array2string(hth, precision=2)} rcn(AtA)={np.array2string(ata, precision=3)} "
           f"t={elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_08_map_beats_nn(config, island_sweep, report):
    t0 = time.perf_counter()
    data, rows, sweep_time = island_sweep
    island = _by_bin(rows, 0.04)
    best_island = min(island, key=lambda r: r["l1_error"])
    nn_island = nn_error(data)

    comet_data = simulate_scenario("gm2", "pm1", config, seed=SEED)
    comet = lambda_sweep(comet_data, DEFAULT_LAMBDAS, (0.04,))
    best_comet = min(comet, key=lambda r: r["l1_error"])
    nn_comet = nn_error(comet_data)
    elapsed = time.perf_counter() - t0 + sweep_time / len(DEFAULT_BIN_SIZES)

    ok = (best_island["l1_error"] < nn_island and best_comet["l1_error"] < nn_comet
          and best_island["jaccard"] >= 0.8 and elapsed < 600)
    report("C8 MAP beats NN", ok,
           f"gm1+pm2 map={best_island['l1_error']:.1f} nn={nn_island:.1f} jaccard={best_island['jaccard']:.3f}; "
           f"gm2+pm1 map={best_comet['l1_error']:.1f} nn={nn_comet:.1f} t={elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_09_forward_invariants(config, report):
    rng = np.random.default_rng(SEED)
    system = build_system(gm1_curve(), 0.04, config.psf, config.imaging)
    bg = config.background.integrated(config.imaging)
    worst = 0.0
    for _ in range(100):
        a, b = rng.uniform(0, 1000, (2, system.n_bases))
        alpha = rng.uniform()
        mix = expected_counts(system, alpha * a + (1 - alpha) * b, bg)
        affine = alpha * expected_counts(system, a, bg) + (1 - alpha) * expected_counts(system, b, bg)
        superpos = expected_counts(system, a + b, bg) - bg
        split = (expected_counts(system, a, bg) - bg) + (expected_counts(system, b, bg) - bg)
        scale = max(np.abs(affine).max(), 1.0)
        worst = max(worst, np.abs(mix - affine).max() / scale, np.abs(superpos - split).max() / scale)
    affine_ok = worst <= 1e-10

    # PSF mass by midpoint quadrature over +-8 sigma on a fine grid
    psf = PsfModel()
    hx, hz = psf.sigma_xy / 20, psf.sigma_z / 20
    ax = (np.arange(-160, 160) + 0.5) * hx
    az = (np.arange(-160, 160) + 0.5) * hz
    gx = np.exp(-0.5 * (ax / psf.sigma_xy) ** 2)
    gz = np.exp(-0.5 * (az / psf.sigma_z) ** 2)
    mass = psf.norm_const * gx.sum() ** 2 * gz.sum() * hx * hx * hz
    probe = np.array([[ax[170], ax[150], az[165]]])
    separable = abs(psf_eval(psf, probe)[0] - psf.norm_const * gx[170] * gx[150] * gz[165])
    mass_ok = abs(mass - 1.0) <= 1e-4 and separable < 1e-12

    camera = CameraModel()
    photons = rng.integers(0, 450, 10_000)  # below u16 saturation
    back = grey_to_photons(camera, photons_to_grey(camera, photons))
    camera_ok = float(np.abs(back - photons).max()) <= 0.5 / camera.slope + 1e-12

    first = simulate_scenario("gm1", "pm2", config, seed=SEED).frames[0]
    second = simulate_scenario("gm1", "pm2", config, seed=SEED).frames[0]
    repro = first.grey.tobytes() == second.grey.tobytes() and first.grey.dtype == np.uint16

    ok = affine_ok and mass_ok and camera_ok and repro
    report("C9 forward-model invariants", ok,
           f"affinity err={worst:.1e} psf mass={mass:.6f} camera max err={np.abs(back - photons).max():.3f} "
           f"bit-reproducible={repro}")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_psnr_robustness(config, report):
    t0 = time.perf_counter()
    lambdas = list(10.0 ** np.arange(-7.0, -2.9, 0.5))
    rows = psnr_sweep("gm1", "pm2", config, (5.0, 15.0, 25.0), lambdas, bin_size=0.04, seed=SEED)
    elapsed = time.perf_counter() - t0
    best = [min(r["l1_error"] for r in rows if r["psnr_db"] == p) for p in (5.0, 15.0, 25.0)]
    non_increasing = all(b <= a for a, b in zip(best, best[1:]))

    top = sorted((r for r in rows if r["psnr_db"] == 25.0), key=lambda r: r["lambda"])
    errs = np.array([r["l1_error"] for r in top])
    i = int(np.clip(np.argmin(errs), 1, len(errs) - 2))
    window = errs[i - 1:i + 2]  # one decade in half-decade steps around the optimum
    spread = float((window.max() - window.min()) / window.mean())
    ok = non_increasing and spread < 0.2 and elapsed < 600
    window_lams = ", ".join(f"{top[j]['lambda']:.1e}" for j in range(i - 1, i + 2))
    report("C10 PSNR robustness", ok,
           f"best l1 per psnr={np.round(best, 1).tolist()} spread at 25dB={spread:.3f} "
           f"(lambdas {window_lams}) t={elapsed:.0f}s")
    assert ok
