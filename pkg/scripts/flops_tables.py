"""Print the analytical FLOPs/parameter table and the merge-placement examples.

    python3 scripts/flops_tables.py
"""
from vitcompress import flops
from vitcompress.atme import MergePlan, plan_merges
from vitcompress.vit import PRESETS


def main() -> None:
    print(f"{'model':<12}{'GMACs':>9}{'params (M)':>12}")
    for name in ("deit-tiny", "deit-small", "deit-base"):
        cfg = PRESETS[name]
        print(f"{name:<12}{flops.total_macs(cfg) / 1e9:>9.3f}{flops.model_params(cfg) / 1e6:>12.2f}")

    small = PRESETS["deit-small"]
    uni = MergePlan.parse("3h,7v")
    print(f"\ndeit-small uniform plan {uni}: reduction {flops.reduction_ratio(small, uni):.2%}")
    print("\n-- deit-small, target 43.3% --")
    print(plan_merges(small, 0.433).to_text())

    tiny = PRESETS["deit-tiny"]
    res = plan_merges(tiny, 0.502)
    print("\n-- deit-tiny, target 50.2% --")
    print(res.to_text())
    print(f"params with merges: {flops.model_params(tiny, res.plan) / 1e6:.3f} M")

    print("\n-- per-component MACs, deit-small with", uni, "--")
    print(flops.model_flops(small, uni).to_text())


if __name__ == "__main__":
    main()
