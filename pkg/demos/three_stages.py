"""The three training stages on a small synthetic task, end to end.

1. Train an all-ReLU (AR) network.
2. Allocate a 25% ReLU budget by sensitivity, then search for the positions
   that should keep a ReLU while distilling a partial-ReLU (PR) copy.
3. Fine-tune the PR network against the AR teacher, matching its post-ReLU
   activation maps.

Takes a few minutes on one CPU core.  Run: python demos/three_stages.py
"""
from dataclasses import replace

from senet.allocator import allocate
from senet.arch import build_model, load_zoo, relu_shapes
from senet.cost import comm_savings, cost_report
from senet.data import stratified_split, synth_generate
from senet.engine import substream
from senet.masks import run_mask_search
from senet.sensitivity import sensitivity_profile
from senet.trainer import MetricsLog, TrainConfig, activation_similarity, evaluate, finetune_pr, train_ar

cfg = TrainConfig(epochs=(12, 4, 8), lr=(0.05, 0.05, 0.001), seed=0)
spec = load_zoo("toy-cnn-8")
full = synth_generate(4, 150, 16, 0.8, seed=0)
test = synth_generate(4, 100, 16, 0.8, seed=1, split="test")
train, val = stratified_split(full, 0.1, substream(0, "split"))

model = build_model(spec, substream(0, "init"))
prof = sensitivity_profile(model, train.images[:256], train.labels[:256])
ar = train_ar(model, train, val, cfg)
print(f"stage 1: AR test accuracy {evaluate(ar, test)[0]:.3f}")

shapes = relu_shapes(spec)
caps = [h * w * c for _, h, w, c in shapes]
alloc = allocate(sum(caps) // 4, prof.eta_hat, caps, prof.relu_layers)
res = run_mask_search(ar, alloc, train, val, cfg)
for h in res.history:
    print(f"stage 2 epoch {h.epoch}: {100 * h.hamming:.0f}% of the ReLUs moved, val {h.val_acc:.3f}")
print(f"stage 2: best snapshot (epoch {res.best_epoch}) test accuracy {evaluate(res.model, test)[0]:.3f}")

log = MetricsLog()
pr = finetune_pr(ar, res.mask, res.model, train, val, cfg, metrics=log)
print(f"stage 3: PR test accuracy {evaluate(pr, test)[0]:.3f}, "
      f"activation cosine to AR {activation_similarity(pr, ar, test):.3f} "
      f"(stage 2 snapshot {activation_similarity(res.model, ar, test):.3f})")

base, ours = cost_report(spec), cost_report(spec, res.mask)
print(f"\n{ours.n_relu:,} of {base.n_relu:,} ReLUs kept: online latency "
      f"{base.latency_us['online'] / 1e3:.0f} ms -> {ours.latency_us['online'] / 1e3:.0f} ms, "
      f"{comm_savings(base, ours):.1f}x less ReLU communication")

# the same budget with ordered dropout: one training run, two widths
od = replace(cfg, dropout_rates=(0.5, 1.0))
ar2 = train_ar(spec, train, val, od)
print(f"\nwidth 1.0 / 0.5 AR accuracy: {evaluate(ar2, test, 1.0)[0]:.3f} / {evaluate(ar2, test, 0.5)[0]:.3f}")
