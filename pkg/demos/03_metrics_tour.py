"""Reference and no-reference metrics on a degraded synthetic scene."""
import numpy as np

from panflow.data import bicubic_upsample, synth_triples
from panflow.metrics import QnrConfig, no_reference_metrics, reference_metrics

t = synth_triples(1, size=128, seed=3)[0]
rng = np.random.default_rng(0)

candidates = {
    "reference": t.H,
    "bicubic": bicubic_upsample(t.L, 4),
    "noisy": np.clip(t.H + 0.03 * rng.standard_normal(t.H.shape), 0, 1),
    "band-swapped": t.H[..., ::-1],
}
print("%-13s" % "" + "".join("%10s" % k for k in ("psnr", "ssim", "sam", "ergas", "d_lambda", "d_s", "qnr")))
for name, img in candidates.items():
    ref = reference_metrics(img, t.H, ratio=0.25)
    nr = no_reference_metrics(img, t.L, t.P, QnrConfig())
    row = [ref[k] for k in ("psnr", "ssim", "sam", "ergas")] + [nr[k] for k in ("d_lambda", "d_s", "qnr")]
    print("%-13s" % name + "".join("%10.4f" % v for v in row))
