import time
import numpy as np
import torch
torch.set_num_threads(1)

from siamtrack.bias_lab import BiasRunConfig, run_simulation
from siamtrack.sampling import SynthSpec

t_all = time.perf_counter()
rows = []
for shift in (0.0, 16.0, 32.0):
    for seed in (0, 1, 2):
        cfg = BiasRunConfig(shift_range=shift, epochs=8, steps_per_epoch=40,
                            eval_samples=160, track_eval_sequences=4,
                            track_eval_frames=40, seed=seed)
        t0 = time.perf_counter()
        st = run_simulation(cfg)
        print(f"shift={shift:4.0f} seed={seed}: central={st.central_mass_fraction:.3f} "
              f"chi2={st.chi_square_vs_uniform:8.2f} entropy={st.entropy:.3f} "
              f"meanIoU={st.mean_iou:.3f}  ({time.perf_counter()-t0:.0f}s)", flush=True)
        rows.append((shift, seed, st.central_mass_fraction, st.chi_square_vs_uniform, st.mean_iou))

import numpy as np
for shift in (0.0, 16.0, 32.0):
    grp = [r for r in rows if r[0] == shift]
    print(f"shift {shift:4.0f}: median central {np.median([r[2] for r in grp]):.3f} "
          f"median chi2 {np.median([r[3] for r in grp]):8.2f} median IoU {np.median([r[4] for r in grp]):.3f}", flush=True)
print(f"total {time.perf_counter()-t_all:.0f}s", flush=True)
