import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from fldefend.profiling import COHORT_SIZES, LAYER_SIZES, detection_timings
from fldefend.utils import write_frame


def main():
    output_dir = Path(__file__).resolve().parent.parent / "runs"
    output_dir.mkdir(parents=True, exist_ok=True)

    print(f"Timing detection for M in {list(COHORT_SIZES)} with layers {list(LAYER_SIZES)}")
    df = detection_timings()
    for row in df.itertuples(index=False):
        print(f"M={row.cohort_size:3d}: {row.median_seconds * 1000:.3f} ms per detection")

    write_frame(df, output_dir / "detection_complexity.csv")
    print("\n" + df.to_string(index=False))

    ratios = df["ratio_to_previous"].dropna()
    in_range = ratios.between(1.5, 2.5).all()
    print(f"\nDoubling ratios {', '.join(f'{r:.2f}' for r in ratios)}: {'near-linear' if in_range else 'outside [1.5, 2.5]'}")
    print(f"Output file saved to: {output_dir / 'detection_complexity.csv'}")


if __name__ == "__main__":
    main()
