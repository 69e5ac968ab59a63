"""
Training the detector with and without temporal fusion
======================================================

A shortened version of the desk-scale ablation: both variants see the same
simulated sequences and the same seeds. The baseline looks at the last frame
only, the fused model carries a memory across the four frames. Runs in
about two minutes on one core. With this little data the numbers are noisy;
the full comparison lives in the acceptance tests.
"""

import dataclasses

from attentivegru.config import desk_config
from attentivegru.harness import evaluate_model, simulate_split
from attentivegru.train import train

cfg = desk_config()

train_seqs = simulate_split(cfg, 120, seed=0)
test_seqs = simulate_split(cfg, 40, seed=0, offset=500_000)

for mode in ("baseline", "attentivegru"):
    run_cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, mode=mode))
    result = train(run_cfg, train_seqs)
    for e in result.epochs:
        print(f"{mode:>12s} epoch {e['epoch']}: train {e['train_loss']:.3f} val {e['val_loss']:.3f}")
    _, ev = evaluate_model(result.model, test_seqs, run_cfg)
    aps = "  ".join(f"AP{t:g}={v:.3f}" for t, v in ev.summary.ap.items())
    print(f"{mode:>12s} mAP {ev.summary.mean_ap:.3f}  {aps}")
