# Whole-model PTQ, the design ladder and the outlier-metric sweep.
import numpy as np

from clq.model import build_toy
from clq.pipeline import LADDER, PipelineConfig, ablate, ablation_csv, run

g = build_toy(seed=0)
qm, report = run(g, PipelineConfig(bits_w=4, bits_a=4))
print(report.table().split("\nlayer")[0])

# the ladder on a few seeds (the acceptance suite uses 20)
rows = {lab: [] for lab, _ in LADDER}
for seed in range(4):
    gs = build_toy(seed=seed)
    for lab, flags in LADDER:
        rows[lab].append(run(gs, PipelineConfig(seed=seed, **flags))[1].e2e_rel_error)
for lab, errs in rows.items():
    print(f"{lab:>15}: median {np.median(errs):.4f}  per seed {np.round(errs, 4)}")

# rotation matters far more at 4 bits than at 8
for bits in (8, 4):
    on = run(g, PipelineConfig(bits_w=bits, bits_a=bits, enable_clps=False, enable_cbc=False))[1]
    off = run(g, PipelineConfig(bits_w=bits, bits_a=bits, enable_obs=False, enable_clps=False,
                                enable_cbc=False))[1]
    print(f"W{bits}A{bits}: without rotation {off.e2e_rel_error:.4f}, with {on.e2e_rel_error:.4f}")

print(ablation_csv(ablate(g, PipelineConfig())))
