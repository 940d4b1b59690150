import os
import sys
import numpy as np

os.environ.setdefault("CROWDSTEER_BACKEND", sys.argv[1] if len(sys.argv) > 1 else "numpy")

from crowdsteer.fields import VectorField
from crowdsteer.regions import Box
from crowdsteer.flow import FlowConfig
from crowdsteer.control import synthesize_micro, evaluate_control
from crowdsteer import kernels
from crowdsteer.backend import resolve_backend

field = VectorField("1", 1)
region = Box([5.0], [6.0])
cfg = FlowConfig(dt=1e-3)
x0 = np.array([[0.0], [1.0]])
x1 = np.array([[9.0], [8.0]])
T = 7.5

plans, cf = synthesize_micro(x0, x1, T, 0.3, field, region, cfg)
for p in plans:
    print(f"plan: src={p.source} tgt={p.target} t0={p.t0:.4f} t1={p.t1:.4f} "
          f"s0={p.s0:.4f} s1={p.s1:.4f} y0={p.y0} y1={p.y1} r={p.r:.4f} R={p.R:.4f} pair={p.pair}")
print("bound:", cf.bound, "windows:", cf.n_windows)

# simulate
pos = np.ascontiguousarray(x0.copy())
n_steps = cf.n_steps
act_off, act_idx = cf.active_lists()
ops, args, lens, stack_need = field.packed
kind, params, margin = region.pack()
w = cf.packed()
snap_steps = np.zeros(0, dtype=np.int64)
snaps = np.zeros((0, pos.shape[0], pos.shape[1]))
if resolve_backend() == "numba":
    fn = kernels._sim
else:
    fn = kernels.np_sim
fn(ops, args, lens, stack_need, pos, cfg.dt, n_steps, 0, 1.0, kind, params,
   margin, w["w_kon"], w["w_kshrink"], w["w_poff"], w["w_npts"], w["w_h"], w["w_beta"],
   w["w_floor"], w["w_gain"], w["w_path"], w["w_vel"], act_off, act_idx,
   snap_steps, snaps)
print("final:", pos.ravel())
targets = np.array([p.target[0] for p in plans])
# plans sorted by kon; map back by source
for p in plans:
    i = int(np.nonzero(x0.ravel() == p.source[0])[0][0])
    err = abs(pos[i, 0] - p.target[0])
    print(f"atom {i}: end {pos[i,0]:.7f} target {p.target[0]} err {err:.3e}")
    assert err < 1e-3, "micro exactness failed"

# evaluate_control checks
pmid = plans[0]
tmid = 0.5 * (pmid.s0 + (T - pmid.s1))
c = cf.window_center(0, tmid)
u_c = evaluate_control(cf, c, tmid)
u_str = (pmid.y1 - pmid.y0) / ((T - pmid.s1) - pmid.s0)
v_c = field.evaluate(c[None])[0]
print("center u:", u_c, "expected ff - v:", u_str - v_c)
assert np.allclose(u_c, u_str - v_c, atol=1e-9)
u_out = evaluate_control(cf, np.array([4.0]), tmid)
assert u_out[0] == 0.0
u_out2 = evaluate_control(cf, np.array([6.5]), tmid)
assert u_out2[0] == 0.0
lamh_probe = cf.window_halfwidth(0, tmid)[0]
# half blend at sup-norm rho = 1.1, the midpoint of the (1, 1.2) band
xq = c + np.array([1.1 * lamh_probe])
rho = abs(xq[0] - c[0]) / lamh_probe
u_q = evaluate_control(cf, xq, tmid)
v_q = field.evaluate(xq[None])[0]
expected = 0.5 * (u_str + 0.0 * (c - xq) - v_q)
print("rho:", rho, "u_q:", u_q, "expected half:", expected)
print("OK", resolve_backend())
assert abs(u_q[0] - expected[0]) < 1e-9, "half-blend probe failed"
print("band probe OK")
