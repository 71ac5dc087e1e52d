"""Per-layer eigenspectra and global-to-local response maps.

Trains a short desk-scale run, extracts the spectrum of every
neighboring-scale pair, then pushes density-ratio responses from the top
scale down to the first feature plane and writes the maps under
``demo_out/``.
"""

import pathlib

import numpy as np

from hfmca import autodiff as ad
from hfmca import data, network, spectrum, telescope, training

OUT = pathlib.Path("demo_out")
OUT.mkdir(exist_ok=True)

spec = network.desk_network_spec(views=4, final_pool=6)
net = network.build_network(spec, training.substream(0, training.STREAM_INIT))
train_set = data.generate_synthetic(256, 4, (12, 12), seed=training.derive_seed(0, 5))
protocol = data.AugmentProtocol(0.5, 0.3, 0.1, seed=training.derive_seed(0, training.STREAM_AUG))
config = training.TrainConfig(mode="self_supervised", views=4, steps=300, batch_size=32, seed=0)
print("training 300 steps ...")
training.Trainer(net, train_set, config, protocol).run(300)

print("fitting per-pair spectra on an evaluation batch")
stats = training.eval_pair_stats(net, train_set.images, seed=0)
spectra = {s: spectrum.extract_spectrum(stats[s], ridge=0.001, layer=s) for s in stats}
for s, res in sorted(spectra.items()):
    top5 = " ".join(f"{v:.3f}" for v in res.sigma[:5])
    print(f"  pair ({s},{s+1}): leading eigenvalues {top5}")
spectrum.write_spectrum_csv(OUT / "spectrum.csv", [spectra[s] for s in sorted(spectra)])

image_index = 3
geom = network.geometry(spec, train_set.images.shape[2:])
with ad.no_grad():
    rng = training.substream(0, training.STREAM_EVAL, 2)
    feats, lowers = net.forward_all(
        train_set.images[image_index : image_index + 1], train=False, noise_rng=rng
    )
fields = {
    s: telescope.local_ratio_field(lowers[s].data[0], feats[s].data[0], spectra[s], geom, s)
    for s in spectra
}
maps = telescope.propagate(fields, geom, source_id=image_index)
for rmap in maps:
    telescope.write_response_csv(OUT / f"response_L{rmap.layer}.csv", rmap)
    telescope.write_response_pgm(OUT / f"response_L{rmap.layer}.pgm", rmap)
    grid = rmap.grid
    print(
        f"layer {rmap.layer}: {grid.shape[0]}x{grid.shape[1]} map, "
        f"range [{grid.min():+.3f}, {grid.max():+.3f}]"
    )
print(f"\nwrote spectrum.csv and response maps to {OUT}/")
