"""Train a small denoiser on the synthetic benchmark and evaluate it.

This is a reduced configuration (smaller model, fewer pairs and steps) that
finishes in a few minutes on a laptop CPU and shows the full pipeline:
structured codebook -> paired dataset -> training -> length-beam decoding
-> metrics. The full desk-scale protocol (2000 pairs, 5000 steps, all three
systems) lives in tests/test_acceptance.py.

Run:  python demos/05_train_and_evaluate.py [system]
      system in {hybrid, multinomial, absorbing}, default hybrid
"""

import sys
import time

import numpy as np

from unitdiff import (
    Denoiser,
    SamplerConfig,
    TrainConfig,
    desk_config,
    evaluate_system,
    generate_dataset,
    make_structured_codebook,
    train,
    uniform_schedule,
)

system = sys.argv[1] if len(sys.argv) > 1 else "hybrid"

cb = make_structured_codebook(10, 10, 16, seed=0)
train_ds = generate_dataset(cb, 400, seed=1, split="train")
test_ds = generate_dataset(cb, 40, seed=2, split="test", exclude=train_ds)
ns = uniform_schedule(1000)

config = desk_config(cb.K, cb.n_classes, embed_dim=48, heads=4,
                     enc_layers=2, dec_layers=2, ffn_dim=96)
model = Denoiser(config, seed=3)
tc = TrainConfig(lr=1e-3, warmup_steps=100, total_steps=800, batch_size=16, seed=4)

print(f"training {system} denoiser: {model.num_params()} parameters, "
      f"{tc.total_steps} steps on {len(train_ds)} pairs")
t0 = time.time()
model, history = train(model, train_ds, system, cb, ns, tc)
losses = [h[1] for h in history]
print(f"done in {time.time() - t0:.0f}s; loss {np.mean(losses[:20]):.3f} -> "
      f"{np.mean(losses[-20:]):.3f}")

for steps in (5, 20):
    report = evaluate_system(system, model, cb, ns, test_ds,
                             SamplerConfig(steps=steps, length_beam=5), seed=5)
    print(f"steps={steps:3d}: meta_bleu={report.meta_bleu:6.2f}  "
          f"unit_acc={report.unit_accuracy:.3f}  edit={report.mean_edit_distance:.2f}")

print("\n(an untrained model scores meta_bleu < 10 on this task; "
      "see tests/test_acceptance.py for the full three-system comparison)")
