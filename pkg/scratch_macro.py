import os
import sys
import time
import numpy as np

os.environ.setdefault("CROWDSTEER_BACKEND", sys.argv[1] if len(sys.argv) > 1 else "numba")

from crowdsteer.fields import VectorField
from crowdsteer.regions import Box
from crowdsteer.flow import FlowConfig
from crowdsteer.cloud import BoxDensitySpec, ParticleCloud, estimate_density
from crowdsteer.mesh import build_mesh
from crowdsteer.control import synthesize_macro
from crowdsteer.wasserstein import wasserstein_discrete
from crowdsteer import kernels
from crowdsteer.backend import resolve_backend

field = VectorField("1", 1)
region = Box([5.0], [6.0])
cfg = FlowConfig(dt=1e-3)
mu0 = BoxDensitySpec([([0.0], [2.0], 0.5)])
mu1 = BoxDensitySpec([([7.0], [8.0], 0.5), ([10.0], [11.0], 0.5)])
T = 8.1

t0 = time.time()
mesh0 = build_mesh(mu0, 4)
mesh1 = build_mesh(mu1, 4)
print(f"meshes: {len(mesh0.cells)} / {len(mesh1.cells)} cells ({time.time()-t0:.1f}s)")

t0 = time.time()
cf, report = synthesize_macro(mesh0, mesh1, T, 0.05, field, region, cfg, delta=0.1)
print(f"synthesis {time.time()-t0:.1f}s")
print({k: v for k, v in report.to_dict().items() if k != "sigma"})
print("windows:", cf.n_windows, "bound:", cf.bound)

# simulate 2000 stratified atoms
cloud = mu0.sample(2000)
pos = np.ascontiguousarray(cloud.positions.copy())
n_steps = cf.n_steps
act_off, act_idx = cf.active_lists()
ops, args, lens, stack_need = field.packed
kind, params, margin = region.pack()
w = cf.packed()
snap_steps = np.arange(0, n_steps + 1, n_steps // 27, dtype=np.int64)
snaps = np.empty((len(snap_steps), pos.shape[0], pos.shape[1]))
fn = kernels._sim if resolve_backend() == "numba" else kernels.np_sim
t0 = time.time()
fn(ops, args, lens, stack_need, pos, cfg.dt, n_steps, 0, 1.0, kind, params,
   margin, w["w_kon"], w["w_kshrink"], w["w_poff"], w["w_npts"], w["w_h"], w["w_beta"],
   w["w_floor"], w["w_gain"], w["w_path"], w["w_vel"], act_off, act_idx,
   snap_steps, snaps)
print(f"sim 2000 atoms x {n_steps} steps: {time.time()-t0:.1f}s")

target = mu1.sample(2000)
final = ParticleCloud(pos, cloud.weights)
w1 = wasserstein_discrete(final, target, p=1)
print("final W1:", w1)

peak = 0.0
for si in range(len(snap_steps)):
    c = ParticleCloud(snaps[si], cloud.weights)
    rep = estimate_density(c, [-1.0], [12.0], 260)
    peak = max(peak, rep.max_density)
print("peak density over run:", peak)
print("OK", resolve_backend())
