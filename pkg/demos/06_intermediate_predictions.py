"""Quality of intermediate predictions along the reverse process.

Every reverse step produces a full clean-sequence prediction; tracking
them shows how quickly decoding converges. With a perfect oracle the curve
is flat at the maximum; for a trained model most of the final quality
arrives within the first quarter of the steps, so intermediate predictions
can serve as early-exit outputs.

Run:  python demos/06_intermediate_predictions.py
"""

import numpy as np

from unitdiff import (
    Denoiser,
    SamplerConfig,
    TrainConfig,
    desk_config,
    generate_dataset,
    make_structured_codebook,
    sample,
    train,
    uniform_schedule,
)
from unitdiff.synthbench import meta_bleu

cb = make_structured_codebook(10, 10, 16, seed=0)
train_ds = generate_dataset(cb, 400, seed=1, split="train")
test_ds = generate_dataset(cb, 30, seed=2, split="test", exclude=train_ds)
ns = uniform_schedule(1000)

model = Denoiser(desk_config(cb.K, cb.n_classes, embed_dim=48, heads=4,
                             enc_layers=2, dec_layers=2, ffn_dim=96), seed=3)
tc = TrainConfig(lr=1e-3, warmup_steps=100, total_steps=800, batch_size=16, seed=4)
print(f"training a small hybrid denoiser ({tc.total_steps} steps)...")
model, _ = train(model, train_ds, "hybrid", cb, ns, tc)

steps = 20
cfg = SamplerConfig(steps=steps, track_intermediate=True)
traces, refs = [], []
for i, pair in enumerate(test_ds.pairs):
    _, trace = sample(model, cb, ns, pair.source, len(pair.target), cfg, seed=10 + i)
    traces.append(trace)
    refs.append(pair.target)

print(f"\ncorpus meta-BLEU of the intermediate prediction at each reverse step:")
print("step |   t  | meta_bleu")
for j in range(steps):
    t = traces[0][j][0]
    score = meta_bleu(cb, [tr[j][1] for tr in traces], refs)
    print(f"{j:4d} | {t:4d} | {score:6.2f}  {'#' * int(score / 2)}")
