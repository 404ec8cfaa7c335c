"""Post-process descriptors: learned discriminative whitening vs PCA.

PCA whitening looks only at the global covariance of the descriptors.
The learned variant (Lw) instead whitens the scatter of matching pairs
and decorrelates the scatter of non-matching pairs, so the same mined
tuples that supervise the network also supervise the projection. Both
reduce dimensionality by keeping leading columns.

Whitening is fitted on the fine-tuned network, so this demo first runs
the stock training recipe on the default corpus, then mines one tuple
per training image to get a dense pair set for the fit.

Run from the repository root (about a minute):

    python demos/05_whitening.py
"""

import numpy as np

from macforge.backbone import init_params, tiny_spec
from macforge.mining import MiningConfig, TupleMiner, build_tuples
from macforge.numeric import SeededStream
from macforge.pipeline import (
    benchmark_ground_truth,
    render_images,
    split_clusters,
)
from macforge.retrieval import DescriptorDB, average_precision, search
from macforge.synthscene import SceneConfig, generate
from macforge.training import LossConfig, TrainConfig, embed_image, train
from macforge.whitening import apply_projection, fit_lw, fit_pcaw


def retrieval_map(vectors, gt):
    db = DescriptorDB(vectors)
    aps = []
    for qid in sorted(gt):
        ranking = [i for i, _ in search(db, vectors[qid], len(db))]
        aps.append(average_precision(ranking, gt[qid]))
    return float(np.mean(aps))


def main():
    scene = SceneConfig(seed=0)
    print(f"default corpus: {scene.clusters} clusters, "
          f"{scene.image_size}px images")
    graphs = generate(scene)
    images = render_images(graphs, scene.image_size)
    train_graphs, val_graphs = split_clusters(graphs, 0.2)

    spec = tiny_spec()
    stream = SeededStream(0)
    params0 = init_params(spec, stream.derive("init"))
    frozen0 = params0.copy()

    def embed0(image):
        return embed_image(frozen0, spec, image)

    mining_cfg = MiningConfig()
    miner = TupleMiner(train_graphs, images, mining_cfg, embed0,
                       "m3", "N2", stream.derive("mine"))
    all0 = {i: embed0(images[i]) for g in graphs for i in g.images}
    val_tuples, _ = build_tuples(
        graphs, all0, mining_cfg, "m3", "N2", stream.derive("valmine"),
        query_clusters={g.cluster_id for g in val_graphs})
    result = train(miner, val_tuples, spec, params0,
                   TrainConfig(max_epochs=5), LossConfig(),
                   stream.derive("train"), loss_kind="contrastive")
    best = result.best_params
    print(f"trained 5 epochs, best epoch {result.best_epoch}")

    descriptors = {i: embed_image(best, spec, images[i])
                   for g in graphs for i in g.images}
    train_ids = sorted(i for g in train_graphs for i in g.images)

    # every training image queries once; the 10% benchmark subsample
    # would leave the 32x32 matching scatter starved of pairs
    tuples, _ = build_tuples(train_graphs,
                             {i: descriptors[i] for i in train_ids},
                             mining_cfg, "m3", "N2",
                             stream.derive("whitenmine"),
                             all_images_as_queries=True)
    matching = [(descriptors[t.query], descriptors[t.positive])
                for t in tuples]
    nonmatching = [(descriptors[t.query], descriptors[n])
                   for t in tuples for n in t.negatives]
    mean_source = [descriptors[i] for i in train_ids]
    print(f"fitting on {len(matching)} matching and {len(nonmatching)} "
          f"non-matching pairs from {len(train_ids)} training images")

    lw = fit_lw(matching, nonmatching, mean_source)
    pcaw = fit_pcaw(mean_source)
    top = np.asarray(lw.spectrum[:5], dtype=np.float64)
    print(f"leading Lw spectrum values: {np.array2string(top, precision=3)}")
    print("columns are ordered by how much non-matching scatter they "
          "keep, so truncation drops the least discriminative directions\n")

    gt = benchmark_ground_truth(val_graphs)
    raw = {i: descriptors[i] for i in sorted(gt)}
    print(f"{'descriptor':<12}{'dim':>4}{'held-out mAP':>14}")
    print(f"{'raw MAC':<12}{32:>4}{retrieval_map(raw, gt):>14.4f}")
    for d in (32, 16):
        for name, model in (("PCAw", pcaw), ("Lw", lw)):
            proj = {i: apply_projection(model, v, d)
                    for i, v in raw.items()}
            print(f"{name:<12}{d:>4}{retrieval_map(proj, gt):>14.4f}")
    print("\nhalving the dimensionality costs Lw about a point while "
          "PCAw falls apart; the pair supervision is what orders the "
          "columns by retrieval value")


if __name__ == "__main__":
    main()
