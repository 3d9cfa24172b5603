"""Strip a token watermark with regeneration, optimization, and distortions.

One watermarked image is pushed through the removal lineup. Rank-1
regeneration is the do-nothing baseline (tokens survive bit for bit);
rank-2 substitutes every codeword with its nearest neighbor; the latent
optimizer perturbs pixels inside an L-inf ball of 8/255 until the verifier
gives up; classical distortions show how much abuse the token path absorbs.

Run:  python3 demos/02_removal_attacks.py
"""

from vqmark.attacks import OptBudget, latentopt_removal, perturb, vq_regen
from vqmark.harness import (build_world, default_config, detect_image,
                            generate_item)
from vqmark.stats import psnr

RUN_SEED = 0


def main() -> None:
    world = build_world(default_config("kgw"))
    image, _ = generate_item(world, RUN_SEED, 0)
    base = detect_image(world, image)
    print(f"watermarked image: trials={base.trials} n_green={base.n_green} "
          f"p={base.p:.3e}")
    print()
    print(f"{'attack':<22} {'p after':>12} {'PSNR dB':>8}   verdict")

    def report(label, attacked):
        rep = detect_image(world, attacked)
        verdict = "mark gone" if rep.p > 0.01 else "still detected"
        print(f"{label:<22} {rep.p:>12.3e} {psnr(attacked, image):>8.2f}   "
              f"{verdict}")

    report("vq-regen k=1", vq_regen(image, world.profile, k=1))
    report("vq-regen k=2", vq_regen(image, world.profile, k=2))
    res = latentopt_removal(image, world.profile,
                            OptBudget(c=8.0 / 255.0, steps=150),
                            verifier=lambda im: detect_image(world, im).p,
                            rng_seed=1)
    report(f"latentopt (step {res.chosen_step})", res.image)
    for kind, strength in (("gauss-noise", 0.02), ("gauss-noise", 0.05),
                           ("gauss-blur", 1.0), ("dct-quantize", 0.02),
                           ("rotate", 2.0), ("brightness", 0.1)):
        report(f"{kind}:{strength:g}", perturb(image, kind, strength, seed=2))
    print()
    print("Rank-1 regeneration proves reverse cycle consistency. Distortions "
          "that keep pixels near the decoded manifold (mild noise, small "
          "rotations) leave tokens recoverable; stronger noise or a global "
          "brightness shift scrambles them, stripping the mark blind. The "
          "white-box optimizer erases it at far higher fidelity.")


if __name__ == "__main__":
    main()
