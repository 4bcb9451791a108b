import json, time, sys
sys.path.insert(0, "tests")
import numpy as np
from _ablation import run_pipeline, run_ce_baseline, ACCEPT_TRAIN, acceptance_dataset
from dscl.metrics import similarity_stats

for tag, overrides in (("sa_scl", {"loss": "scl"}),
                       ("simclr5_dscl", {"augmentation": "simclr5"})):
    t0 = time.time()
    out = run_pipeline((tag, 0, overrides, None))
    print(tag, f"oa={out['oa']:.3f} intra={out['intra']:.3f} inter={out['inter']:.3f} "
          f"con={out['stage1_contrastive'][0]:.2f}->{out['stage1_contrastive'][-1]:.2f} secs={time.time()-t0:.0f}", flush=True)

out = run_ce_baseline(("ce_only", 0, ACCEPT_TRAIN["epochs_stage1"]))
print("ce_only", f"oa={out['oa']:.3f} intra={out['intra']:.3f} inter={out['inter']:.3f}", flush=True)
