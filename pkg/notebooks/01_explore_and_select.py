# %% Explore the default room and watch the selector thin out the image stream
import numpy as np

from exploregs import bow
from exploregs.config import PipelineConfig
from exploregs.explore import UNKNOWN, Explorer
from exploregs.pipeline import SelectorStream, eval_table1, format_table1, record_sequence, sequence_vectors, \
    train_scene_vocabulary
from exploregs.simworld import build_world

cfg = PipelineConfig()
scene = build_world(cfg.world)
cam = cfg.camera.model()
print("room", scene.dims, "voxel", scene.voxel_size, "m,", int(scene.solid.sum()), "solid cells")

# %% vocabulary from a survey of the room, then the selector fed frame by frame
vocab = train_scene_vocabulary(scene, cam, cfg.selector)
stream = SelectorStream(vocab, cfg.selector.features(), cfg.selector.params())
explorer = Explorer(scene, cam, cfg.explore)
frames = []
for frame in explorer.run():
    frames.append(frame)
    stream.push(frame)
res = explorer.result(frames)
free = scene.free_interior()
print(f"exploration {res.status} after {res.rounds} rounds, {len(frames)} frames, "
      f"{100 * np.mean(res.grid.states[free] != UNKNOWN):.1f}% of free cells known")
print("unknown cells per round:", res.unknown_history)

# %% keyframes and pairs
n = len(frames)
print("keyframes:", stream.keyframes)
for p in stream.pairs:
    print(f"  pair ({p.i:2d}, {p.k:2d})  eta = {p.eta:.3f}")
print(f"{len(stream.pairs)} pairs instead of {bow.complete_pair_count(n)}, "
      f"reduction {bow.reduction_percent(len(stream.pairs), n):.1f}%")

# %% pair counts on a steady 60-frame patrol recording
seq = record_sequence(scene, cam, 60)
vecs = sequence_vectors(seq, vocab, cfg.selector.features())
print(format_table1(eval_table1(vecs, [f.timestamp for f in seq], cfg.selector.params())))

# %% a looser admission threshold keeps more keyframes; at 2 Hz most keyframes are admitted
# because no recent frame is similar enough to act as a reference, so small thresholds change little
for thr in (0.04, 0.3, 1.0, 2.0):
    keys, pairs = bow.select_pairs(vecs, [f.timestamp for f in seq],
                                   bow.SelectorParams(thr_in=thr, compare_to="previous"))
    print(f"thr_in {thr:.2f}: {len(keys):2d} keyframes, {len(pairs):3d} pairs")
