import sys, time
import numpy as np
import torch
torch.set_num_threads(1)

from siamtrack.model import ModelConfig, build_model
from siamtrack.sampling import SynthSpec, PairSampler, synth_sequence
from siamtrack.training import TrainConfig, train
from siamtrack.tracker import Tracker, TrackerConfig
from siamtrack.bias_lab import mean_iou_on_sequences
from siamtrack.harness import eval_ope, load_dataset, RandomBoxTracker
from siamtrack.sampling import make_dataset
import tempfile, pathlib

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 7
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 20
steps = int(sys.argv[3]) if len(sys.argv) > 3 else 50

spec = SynthSpec()
model = build_model(ModelConfig.desk(), seed=seed)
tc = TrainConfig(epochs=epochs, steps_per_epoch=steps, seed=seed)
sampler = PairSampler(spec, shift_range=tc.shift_range, scale_jitter=tc.scale_jitter, seed=seed)
t0 = time.perf_counter()
res = train(model, sampler, tc)
print(f"train {epochs}x{steps}: {time.perf_counter()-t0:.0f}s  loss {res.initial_loss:.3f} -> {res.final_loss:.3f}  ratio {res.final_loss/res.initial_loss:.3f}", flush=True)
print("epoch means:", [round(v,3) for v in res.epoch_means], flush=True)

# eval on held-out sequences
root = pathlib.Path(tempfile.mkdtemp())
make_dataset(root, spec, 10, 60, seed=1000)
ds = load_dataset(root)
trk_cfg = TrackerConfig.desk()
t0 = time.perf_counter()
r = eval_ope(lambda s: Tracker(model, trk_cfg), ds, precision_threshold=10.0)
print(f"eval: {time.perf_counter()-t0:.0f}s  AUC {r.auc:.3f}  precision {r.precision:.3f}  meanIoU {r.mean_iou:.3f}", flush=True)
rb = eval_ope(lambda s: RandomBoxTracker(0), ds, precision_threshold=10.0)
print(f"random baseline: AUC {rb.auc:.4f}", flush=True)
