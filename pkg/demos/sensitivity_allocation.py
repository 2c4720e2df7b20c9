"""Which layers of an untrained network need their ReLUs most?

The connection sensitivity of each weight is measured once at
initialization.  Layers whose weights rarely survive a 10% proxy pruning
are treated as the most ReLU sensitive and receive more of the budget.

Run: python demos/sensitivity_allocation.py
"""
from senet.allocator import allocate, uniform_allocation
from senet.arch import build_model, load_zoo, relu_shapes
from senet.data import synth_generate
from senet.sensitivity import sensitivity_profile

spec = load_zoo("toy-cnn-8")
data = synth_generate(4, 64, 16, 0.8, seed=0)
model = build_model(spec, seed=0)
prof = sensitivity_profile(model, data.images, data.labels, density=0.1)

shapes = relu_shapes(spec)
caps = [h * w * c for _, h, w, c in shapes]
budget = sum(caps) // 4
sens = allocate(budget, prof.eta_hat, caps, prof.relu_layers)
flat = uniform_allocation(budget, caps, prof.relu_layers)

print(f"budget {budget:,} of {sum(caps):,} ReLUs\n")
print(f"{'layer':12s} {'capacity':>8s} {'kept by pruning':>15s} {'eta_hat':>8s} {'sensitive':>9s} {'uniform':>8s}")
for i, name in enumerate(prof.relu_layers):
    print(f"{name:12s} {caps[i]:8,} {prof.eta_theta[i]:15.3f} {prof.eta_hat[i]:8.3f} "
          f"{sens.counts[i]:9,} {flat.counts[i]:8,}")
