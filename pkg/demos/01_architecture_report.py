"""Build the network, count its parameters and FLOPs, and search for the
structural reading that best matches the published budgets.

Run: python demos/01_architecture_report.py
"""
from lwmscnn import analyzer
from lwmscnn.model import ModelConfig, build

# The full model at 224x224. Weights are left at zero because only shapes matter here.
model = build(ModelConfig(), init=False)
report = analyzer.analyze(model, accuracy=96.63)
print(report.to_text())
print()

# Every ablation under the same counting convention
print(f"{'variant':<16}{'params':>10}{'GFLOPs':>9}")
for variant in ("full", "no_se", "no_depthwise", "no_residual", "no_augmentation"):
    r = analyzer.variant_report(variant)
    print(f"{variant:<16}{r.total_params:>10,}{r.gflops:>9.4f}")
print()

# Efficiency is accuracy points per GFLOP
for name, (params, gflops, acc, printed) in analyzer.COMPARISON_TABLE.items():
    print(f"{name:<16} {acc:6.2f}% / {gflops:6.3f} GFLOPs = "
          f"{analyzer.efficiency(acc, gflops):7.2f} (printed {printed})")
print()

# Reconciliation: exhaustive search over widths, biases, BN placement and
# counting conventions, scored against the four published parameter counts.
result = analyzer.reconcile()
print(result.to_text())
