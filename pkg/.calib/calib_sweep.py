import itertools, pathlib, tempfile, time
import numpy as np
import torch
torch.set_num_threads(1)

from siamtrack.model import ModelConfig, build_model
from siamtrack.sampling import SynthSpec, PairSampler, make_dataset, synth_sequence
from siamtrack.training import TrainConfig, train
from siamtrack.tracker import Tracker, TrackerConfig
from siamtrack.harness import eval_ope, load_dataset
from siamtrack.checkpoint import save_checkpoint
from siamtrack.geometry import iou

spec = SynthSpec()
model = build_model(ModelConfig.desk(), seed=7)
tc = TrainConfig(epochs=20, steps_per_epoch=50, seed=7)
sampler = PairSampler(spec, shift_range=tc.shift_range, scale_jitter=tc.scale_jitter, seed=7)
res = train(model, sampler, tc)
save_checkpoint("/root/pkg/.calib/ref7.npz", model)
print(f"loss {res.initial_loss:.3f} -> {res.final_loss:.3f}", flush=True)

root = pathlib.Path(tempfile.mkdtemp())
make_dataset(root, spec, 10, 60, seed=1000)
ds = load_dataset(root)

# per-frame IoU trajectories with default tracker config
cfg = TrackerConfig.desk()
for seq in ds.sequences[:4]:
    tr = Tracker(model, cfg)
    frames = [seq.load_frame(t) for t in range(len(seq.frame_paths))]
    tr.init(frames[0], seq.boxes[0])
    ious = [1.0]
    for t in range(1, len(frames)):
        box, sc = tr.step(frames[t])
        ious.append(iou(box, seq.boxes[t]))
    arr = np.array(ious)
    print(f"{seq.name}: mean {arr.mean():.3f} min {arr.min():.3f} "
          f"traj {[round(v,2) for v in arr[::6]]}", flush=True)

# sweep tracker knobs
print("\nsweep:", flush=True)
best = None
for wi, slr, pk in itertools.product((0.2, 0.3, 0.4, 0.5), (0.15, 0.3, 0.5), (0.02, 0.04, 0.1)):
    cfg = TrackerConfig.desk(window_influence=wi, size_lr=slr, penalty_k=pk)
    r = eval_ope(lambda s: Tracker(model, cfg), ds, precision_threshold=10.0)
    row = (r.auc, wi, slr, pk, r.mean_iou)
    if best is None or row[0] > best[0]:
        best = row
    print(f"wi={wi} size_lr={slr} pk={pk}: AUC {r.auc:.3f} meanIoU {r.mean_iou:.3f}", flush=True)
print("BEST:", best, flush=True)
