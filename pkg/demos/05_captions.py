"""
Structured captions and clip filtering
======================================

Build per-view captions, fuse them by majority vote and embed the result.
"""
from __future__ import annotations

import numpy as np

from drivesynth.datacrafter import (ViewCaptionSet, build_structured_caption, caption_embed, caption_to_json,
                                    filter_clips, fuse_captions, score_clip)

scene = {"time": "Daytime", "weather": "Sunny", "road_type": "Urban Road", "road_surface": "Asphalt",
         "lane": "Multi-Lane", "environment_type": "Intersection", "surroundings": "shops and parked cars",
         "traffic": "moderate"}
front = build_structured_caption(scene, [("car", (40, 30, 90, 70), "white van turning left")])
left = build_structured_caption(dict(scene, weather="Cloudy"), [("pedestrian", (10, 20, 20, 60), "walking")])
right = build_structured_caption(scene)

fused = fuse_captions(ViewCaptionSet({0: front, 1: left, 2: right}))
print(caption_to_json(fused))

e = caption_embed(fused)
print("embedding", e.shape, "norm", round(float(np.linalg.norm(e)), 6))

clips = [("clip_a", score_clip((0.8, 0.7, 0.9))), ("clip_b", score_clip((0.2, 0.1, 0.3)))]
print("kept at tau 0.5:", filter_clips(clips, 0.5))
