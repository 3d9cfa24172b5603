"""Generate watermarked toy images for each scheme and verify them.

For every scheme this builds the default toy world, draws one watermarked
image and one unwatermarked control, and runs the verifier on both. The
sidecar ground truth (tokens or bits) is scored too, demonstrating that the
pixel path loses nothing on the clamp-free toy profile.

Run:  python3 demos/01_generate_and_detect.py
"""

from vqmark.harness import (SCHEMES, build_world, default_config,
                            detect_ground_truth, detect_image, generate_item)

RUN_SEED = 0


def main() -> None:
    print(f"{'scheme':<12} {'kind':<9} {'trials':>6} {'n_green':>7} "
          f"{'z':>8} {'p':>12} {'truth p':>12}")
    for scheme in SCHEMES:
        world = build_world(default_config(scheme))
        for watermarked, kind in ((True, "marked"), (False, "control")):
            image, meta = generate_item(world, RUN_SEED, 0, watermarked)
            rep = detect_image(world, image)
            truth = detect_ground_truth(world, meta)
            print(f"{scheme:<12} {kind:<9} {rep.trials:>6} {rep.n_green:>7} "
                  f"{rep.z:>8.2f} {rep.p:>12.3e} {truth.p:>12.3e}")
    print()
    print("Marked rows sit at astronomically small p; controls hover near "
          "chance. Image-path and ground-truth p agree exactly.")


if __name__ == "__main__":
    main()
