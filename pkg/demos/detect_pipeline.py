# %% [markdown]
# # End-to-end detection with random weights
#
# Weights are untrained, so the detections are meaningless; the point is to
# walk the pipeline: letterbox, forward, DFL decode, NMS and the mapping back
# to source pixels. The nano profile at 320x320 keeps this to a few seconds.

# %%
import numpy as np

from hierlight import forward, init_weights
from hierlight.cli import load_graph
from hierlight.detect import DecodeConfig, letterbox, postprocess, to_json_line
from hierlight.graph import head_strides

graph = load_graph("hierlight", "n", imgsz=320)
store = init_weights(graph, seed=0)
print(f"{len(graph.nodes)} nodes, head strides {head_strides(graph)}")

# %% [markdown]
# A synthetic 180x300 frame: dark background with one bright rectangle.

# %%
image = np.full((180, 300, 3), 30, np.uint8)
image[60:90, 100:160] = 220
x, transform = letterbox(image, graph.imgsz)
print("letterbox scale", transform.scale, "padding", (transform.pad_x, transform.pad_y))

# %%
taps = forward(graph, store, x)
for name in ("P2-head", "P3-head", "P4-head", "P5-head"):
    print(name, taps[name].shape)

# %% [markdown]
# Class biases start at zero and the random class weights are small, so
# untrained scores cluster just around sigmoid(0) = 0.5. Moving the
# threshold across 0.5 changes the candidate count by an order of magnitude.

# %%
heads = [taps[f"P{s.bit_length() - 1}-head"] for s in head_strides(graph)]
for conf in (0.51, 0.45):
    dets = postprocess(heads, transform, DecodeConfig(conf_thresh=conf))
    print(f"conf {conf}: {len(dets)} detections")
for det in dets[:3]:
    print(to_json_line("synthetic", det))
