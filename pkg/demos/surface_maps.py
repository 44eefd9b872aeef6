"""End-to-end walk-through at small scale: collect, train, evaluate, race.

Run: python3 demos/surface_maps.py [configs/quick.json]

Takes about two minutes on one CPU core.  At this size the models are
under-trained and the ranking of variants is not stable; the comparisons in
the acceptance suite use configs/acceptance.json and 15 minutes of data.
"""
import sys
import time

import numpy as np

from surfmap import experiments as ex
from surfmap.config import ExperimentConfig

cfg = ExperimentConfig.load(sys.argv[1] if len(sys.argv) > 1 else "configs/quick.json")
t0 = time.process_time()

# 1. Expert driving on three training tracks plus a held-out track with re-arranged materials.
data = ex.collect(cfg, minutes=9.0)
s = data.summary
print(f"collected {s['transitions']} transitions over {s['cells']} cells, {s['slip_events']} slip events")

# 2. Three-stage training: free latents + dynamics, mapper regression, joint fine-tuning.
models = ex.train_all(cfg, data)
print(f"trained in {time.process_time() - t0:.0f} s CPU")

# 3. Multi-step prediction error on the held-out track, with the map built chronologically.
res = ex.eval_l2(cfg, models, data.test)
steps = cfg.eval.n_steps
print("variant  " + "  ".join(f"L2_{n:<4d}" for n in steps))
for v, row in res.items():
    print(f"{v:8s} " + "  ".join(f"{row[n]:.4f}" for n in steps))

# 4. How well does the map separate the materials it has seen?
ms = ex.map_structure(cfg, models, data.test, "AIS")
print(f"AIS map: {int(ms.snapshot.visited.sum())} visited cells, interior purity {ms.purity:.2f}, "
      f"median variance boundary {ms.var_boundary:.3g} vs interior {ms.var_interior:.3g}")

# 5. Closed-loop laps with online mapping, against the map-free model.
for v in ("no-map", "AIS"):
    _, m, _ = ex.race(cfg, models, v, synchronous=True)
    r = m.summary()
    print(f"{v:7s} lap times {np.round(m.lap_times, 2)}  cte {r['cte_mean']:.2f} m  "
          f"violations/lap {r['violations_mean']:.1f}  interventions {r['interventions']}")
