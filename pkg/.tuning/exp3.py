import json, time, sys
sys.path.insert(0, "tests")
from _ablation import run_pipeline

for tag, overrides in (
    ("b16_e24_lr01", {"batch_images": 16, "epochs_stage1": 24}),
    ("b16_e24_lr02", {"batch_images": 16, "epochs_stage1": 24, "lr_fe": 0.02}),
    ("b8_e24_lr01",  {"epochs_stage1": 24}),
    ("b16_e36_lr01", {"batch_images": 16, "epochs_stage1": 36}),
):
    t0 = time.time()
    out = run_pipeline((tag, 0, overrides, None))
    print(tag, f"oa={out['oa']:.3f} intra={out['intra']:.3f} inter={out['inter']:.3f} "
          f"con={out['stage1_contrastive'][0]:.2f}->{out['stage1_contrastive'][-1]:.2f} "
          f"probe={[round(x,2) for x in out['probe_oa_by_epoch']]} secs={time.time()-t0:.0f}", flush=True)
