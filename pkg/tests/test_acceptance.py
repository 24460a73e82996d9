"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (visible even when pytest
captures output) and then asserts the same condition.
"""

import math
import time

import numpy as np
import pytest

from eptissue import cell_static, cli, evolution as ev, fem
from eptissue.mesh import build_unit_cell, reflection_map
from eptissue.model import END_TIMES, ModelParams, beta, field_to_voltage

pytestmark = pytest.mark.slow

H = 0.02
F_DISC = math.pi * 0.25 ** 2
_runs = []


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def cell():
    return ev.prepare_cell(ModelParams(mesh_h=H))


def run(p, prepared=None, **kw):
    res = ev.run_two_plates(p, prepared=prepared, **kw)
    _runs.append(res)
    return res


def at_field(E, **kw):
    T = kw.pop("t_end", END_TIMES.get(E))
    return ModelParams(mesh_h=H, g=field_to_voltage(E, ModelParams()), t_end=T, **kw)


def test_c01_static_limits(verdict):
    p = ModelParams(mesh_h=0.01)
    _, system, _, corr = ev.prepare_cell(p)
    A, A_ins = corr.A[0, 0], corr.A_insulating[0, 0]
    ref = cell_static.perrins_oracle(F_DISC, p.sigma_c / p.sigma_e) * p.sigma_e
    ref_ins = cell_static.perrins_oracle(F_DISC, 0.0) * p.sigma_e
    e1, e2 = abs(A / ref - 1), abs(A_ins / ref_ins - 1)
    ratio = A / A_ins
    target = 3.5941 / 3.3587
    ok = e1 < 1e-3 and e2 < 1e-3 and abs(ratio / target - 1) < 5e-3
    scale = 5.0 / p.sigma_e
    verdict(1, "static limits", ok,
            f"rel err A11 {e1:.2e}, A_ins11 {e2:.2e}; ratio {ratio:.5f} vs {target:.5f}; "
            f"rescaled to sigma_e = 5: A11 {A * scale:.4f}, A_ins11 {A_ins * scale:.4f} (reported)")


def test_c02_homogeneous_identity(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    m = build_unit_cell(H)
    for s0 in (1.0, 0.0526):
        s = fem.assemble(m, s0, s0)
        c = cell_static.compute_correctors(fem.factorize(s))
        A = cell_static.effective_A(c, s)
        worst = max(worst, np.abs(A - s0 * np.eye(2)).max(),
                    *(np.abs(c.corrector(j).values_c).max() for j in range(2)),
                    *(np.abs(c.corrector(j).values_e).max() for j in range(2)))
    elapsed = time.perf_counter() - t0
    verdict(2, "homogeneous identity", worst < 1e-10 and elapsed < 10,
            f"max deviation {worst:.1e}, {elapsed:.1f} s")


def test_c04_insulating_relaxation(verdict, cell):
    t0 = time.perf_counter()
    p = ModelParams(mesh_h=H, g=0.0, dt=1 / 3, t_end=200.0)
    res = run(p, cell, kernel_history="none")
    elapsed = time.perf_counter() - t0
    s = res.history.sigma_eff[:, 0, 0]
    gap = abs(s[-1] / res.A_insulating[0, 0] - 1)
    mono = bool(np.all(np.diff(s) <= 0))
    verdict(4, "insulating relaxation", gap < 0.01 and mono and elapsed < 300,
            f"|sigma(T)/A_ins - 1| = {gap:.2e}, monotone {mono}, {elapsed:.0f} s")


def test_c05_convergence_orders(verdict):
    spec = cli.ExperimentSpec(kind="convergence_mesh")
    h, _, dh, slope_h = cli.convergence_mesh(spec)
    dts, _, dd, slope_t = cli.convergence_time(cli.ExperimentSpec(kind="convergence_time"))
    ok = 1.7 <= slope_h <= 2.3 and 0.8 <= slope_t <= 1.2
    verdict(5, "convergence orders", ok,
            f"mesh slope {slope_h:.3f} (h = {h}, diffs {np.array2string(dh, precision=3)}); "
            f"time slope {slope_t:.3f} (dt0 = {dts[0]:.4g}, diffs {np.array2string(dd, precision=3)})")


def test_c06_nonmonotone_conductivity(verdict, cell):
    res = run(at_field(2500.0, t_end=20.0), cell, kernel_history="none")
    s = res.history.sigma_eff[:, 0, 0]
    k = int(np.argmin(s))
    ok = 0 < k < len(s) - 1 and s[k] < s[0] and s[k] < s[-1]
    verdict(6, "non-monotone conductivity", ok,
            f"min {s[k]:.6g} at t = {res.history.t[k]:.3g}; sigma(0) {s[0]:.6g}, sigma(T) {s[-1]:.6g}")


@pytest.fixture(scope="module")
def sweep(cell):
    # 100 V/cm is added to the table fields for the low-field plateau check
    Es = sorted(set(END_TIMES) | {100.0})
    spec = cli.ExperimentSpec(kind="sweep_field", params=ModelParams(mesh_h=H),
                              sweep_E=tuple(Es), sweep_steps=600)
    results = [cli._sweep_point(spec, E, cell) for E in Es]
    _runs.extend(results)
    return Es, results


def test_c07_sigmoid_field_dependence(verdict, sweep):
    Es, results = sweep
    final = {E: r.history.sigma_eff[-1, 0, 0] for E, r in zip(Es, results)}
    values = np.array([final[E] for E in Es])
    nondec = bool(np.all(np.diff(values) >= 0))
    low = abs(final[100.0] / final[0.0] - 1)
    high = abs(final[5000.0] / final[3750.0] - 1)
    ok = nondec and low < 0.01 and high < 0.03
    verdict(7, "sigmoid field dependence", ok,
            f"nondecreasing {nondec}; change 0->100 {low:.2e}, 3750->5000 {high:.2e}; "
            f"sigma(T) from {values[0]:.5g} to {values[-1]:.5g}")


def test_c08_poration_bounds(verdict, sweep):
    _, results = sweep
    bad_bounds = bad_mono = 0
    for r in results:
        X, u = r.membrane.X0, r.membrane.u0_jump
        bad_bounds += int(np.sum((X < 0) | (X > 1)))
        up = beta(u[:-1], r.params) >= X[:-1]
        bad_mono += int(np.sum(X[1:][up] < X[:-1][up]))
    ok = bad_bounds == 0 and bad_mono == 0
    verdict(8, "poration bounds and monotonicity", ok,
            f"{len(results)} sweep runs, {bad_bounds} bound and {bad_mono} monotonicity violations")


def test_c09_kernel_properties(verdict, cell):
    res = run(at_field(500.0), cell, kernel_history="full")
    B = res.kernel.B
    ref = abs(res.kernel.B00[0, 0])
    b21 = np.abs(B[1, 0]).max()
    sym_ok = b21 <= 1e-6 * ref + 1e-10
    gaps = []
    for h in (0.04, 0.02):
        r = ev.run_two_plates(ModelParams(mesh_h=h, g=10.0, dt=0.2, t_end=20.0),
                              kernel_history="full")
        gaps.append(np.abs(r.kernel.B[0, 1] - r.kernel.B[1, 0]).max() / abs(r.kernel.B00[0, 0]))
    refine_ok = all(g <= 1e-6 * (h * h + 0.2) for g, h in zip(gaps, (0.04, 0.02)))
    times = []
    for E in (500.0, 2500.0, 5000.0):
        p = at_field(E, full_tensor=False)
        p = p.replace(dt=p.t_end / 600)
        r = run(p, cell, kernel_history="none")
        times.append(ev.first_decay_time(r.kernel.B_tau0[0, 0], r.history.t, 0.05))
    order_ok = times[0] > times[1] > times[2]
    verdict(9, "kernel properties", sym_ok and refine_ok and order_ok,
            f"max|B21| = {b21:.1e} (B11(0,0) = {ref:.3e}); |B12-B21|/|B11(0,0)| at h=0.04, 0.02: "
            f"{gaps[0]:.1e}, {gaps[1]:.1e}; 5% decay times {times[0]:.3g} > {times[1]:.3g} > {times[2]:.3g}")


def test_c10_membrane_trace(verdict, cell):
    res = run(at_field(500.0, full_tensor=False), cell, kernel_history="none")
    trace = np.abs(res.history.pole_u0)
    d = np.diff(trace)
    peaks = np.flatnonzero((d[:-1] > 0) & (d[1:] <= 0)) + 1
    single = len(peaks) == 1 and trace[peaks[0]] == trace.max()
    # the peak is followed by a decline; a slow late rebound is reported
    k = peaks[0] if single else len(trace) - 1
    low = trace[k:].min()
    declines = single and d[k] < 0 and trace[-1] < trace[k]
    mesh = res.mesh
    perm = reflection_map(mesh, 0)
    where = {int(v): i for i, v in enumerate(mesh.interface_nodes)}
    mi = np.array([where[int(perm[v])] for v in mesh.interface_nodes])
    u = res.membrane.u0_jump[-1]
    odd = np.abs(u[mi] + u).max()
    mean = abs(mesh.lumped_weights @ u) / mesh.lumped_weights.sum()
    ok = single and declines and odd < 1e-5 and mean < 1e-10
    peak = res.history.t[peaks[0]] if len(peaks) else math.nan
    verdict(10, "membrane-trace shape", ok,
            f"{len(peaks)} interior maximum of |[u0]| at t = {peak:.3g} "
            f"(pole jump {res.history.pole_u0[peaks[0]] if len(peaks) else math.nan:.4g}), "
            f"then decline {declines} (to {low:.4g}, final {trace[-1]:.4g}); oddness {odd:.1e}, interface mean {mean:.1e}")


def test_c11_operator_properties(verdict, cell):
    _, system, fact, _ = cell
    rng = np.random.default_rng(11)
    worst_sym = 0.0
    min_energy = math.inf
    for _ in range(20):
        J1, J2 = rng.standard_normal((2, system.n_g))
        I1, _ = fem.solve_jumps(fact, J1)
        I2, _ = fem.solve_jumps(fact, J2)
        a = fem.interface_product(system, I1, J2)
        b = fem.interface_product(system, I2, J1)
        worst_sym = max(worst_sym, abs(a - b) / max(abs(a), abs(b)))
        for J, I in ((J1, I1), (J2, I2)):
            e = fem.interface_product(system, I, J)
            min_energy = min(min_energy, e / np.dot(J, system.iface_mass @ J))
    ok = worst_sym <= 1e-9 and min_energy >= -1e-9
    verdict(11, "operator symmetry and positivity", ok,
            f"max relative asymmetry {worst_sym:.1e}, min Rayleigh quotient {min_energy:.3e}")


def test_c03_time_zero_identity(verdict, cell):
    # runs after the others in this module, so it covers every run made above
    if not _runs:
        run(at_field(500.0, t_end=1.0), cell, kernel_history="none")
    exact = [np.array_equal(r.history.sigma_eff[0], r.history.A) for r in _runs]
    verdict(3, "time-zero identity", all(exact),
            f"sigma_eff(0) == A bitwise in {sum(exact)}/{len(exact)} runs")
