"""Short training run on synthetic scenes, compared against the reference predictors.

    python scripts/learning_signal.py --steps 500 --train 200 --val 40
"""
import argparse
import time

import numpy as np

from chadet.synth import SynthConfig, make_sample
from chadet.train import LrSchedule, TrainConfig, evaluate, train

ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
ap.add_argument("--steps", type=int, default=500)
ap.add_argument("--train", type=int, default=200)
ap.add_argument("--val", type=int, default=40)
ap.add_argument("--lr", type=float, default=None, help="constant rate instead of the desk preset")
ap.add_argument("--log-every", type=int, default=50)
args = ap.parse_args()

cfg = SynthConfig()
train_set = [make_sample([0, 0, i], cfg)[0] for i in range(args.train)]
val_set = [make_sample([0, 1, i], cfg)[0] for i in range(args.val)]
tc = TrainConfig(max_steps=args.steps)
if args.lr is not None:
    tc = TrainConfig(max_steps=args.steps, schedule=LrSchedule.constant(args.lr, tc.epochs))

t0 = time.perf_counter()
res = train(tc, train_set, log_fn=lambda line: int(line.split()[0][5:]) % args.log_every == 0 and print(line))
totals = np.array([h["total"] for h in res.history])
print(f"{res.steps} steps in {time.perf_counter() - t0:.0f}s; "
      f"loss {totals[:10].mean():.3f} -> {totals[-50:].mean():.3f}")

ev = evaluate(res.params, val_set, tc)
for name, rep in [("model", ev.model), ("sparse-to-dense output", ev.quasi_dense),
                  ("constant mean", ev.constant_mean), ("min-pool fill", ev.pooled_fill)]:
    print(f"{name:24s} MAE {rep.mae_mm:8.1f} mm  RMSE {rep.rmse_mm:8.1f} mm  "
          f"iMAE {rep.imae_per_km:6.2f}  iRMSE {rep.irmse_per_km:6.2f} /km")
