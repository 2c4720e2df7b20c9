"""How much does private inference of a CIFAR ResNet18 cost, and what do ReLU budgets buy?

Run: python demos/cost_model.py
"""
from senet.arch import load_zoo, relu_shapes
from senet.cost import comm_savings, cost_report, default_table, sweep

table = default_table()
spec = load_zoo("resnet18-cifar")

full = cost_report(spec, table=table)
print(f"ResNet18 on 32x32 inputs: {full.n_mac:,} MACs and {full.n_relu:,} ReLUs")
print(f"one online ReLU costs {table.t('relu', 'online') / table.t('linear', 'online'):.0f}x a MAC")
relu_share = full.n_relu * table.t("relu", "online") / full.latency_us["online"]
print(f"ReLUs account for {100 * relu_share:.1f}% of the online latency\n")

print("ReLUs per layer group:")
groups: dict[str, int] = {}
for name, h, w, c in relu_shapes(spec):
    groups[name.split("_")[0]] = groups.get(name.split("_")[0], 0) + h * w * c
for g, n in groups.items():
    print(f"  {g:8s} {n:>8,}")

print("\nbudget     online latency   ReLU comm savings")
for rep in sweep(spec, [557_056, 150_000, 100_000, 49_600], table):
    print(f"{rep.n_relu:>7,}   {rep.latency_us['online'] / 1e6:9.2f} s      {comm_savings(full, rep):6.2f}x")
