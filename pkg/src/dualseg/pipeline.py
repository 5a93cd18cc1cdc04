"""Batch prediction and evaluation over scenes."""
from __future__ import annotations

import torch

from dualseg.data.synthetic import Scene
from dualseg.metrics import EvalReport, evaluate
from dualseg.model import Segmenter
from dualseg.structures import InstanceAnnotation
from dualseg.training import make_batch


def predict_scenes(model: Segmenter, scenes: list[Scene], batch_size: int = 8) -> dict[int, list[InstanceAnnotation]]:
    model.eval()
    dtype = next(model.parameters()).dtype
    preds: dict[int, list[InstanceAnnotation]] = {}
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i : i + batch_size]
        batch = make_batch(chunk, dtype)
        depth = batch.depth3 if model.fusion is not None else None
        for s, anns in zip(chunk, model.segment(batch.rgb, depth)):
            for a in anns:
                a.image_id = s.image_id
            preds[s.image_id] = anns
    return preds


def ground_truth(scenes: list[Scene]) -> dict[int, list[InstanceAnnotation]]:
    return {s.image_id: list(s.instances) for s in scenes}


def evaluate_model(model: Segmenter, scenes: list[Scene], class_agnostic: bool = True) -> EvalReport:
    with torch.no_grad():
        preds = predict_scenes(model, scenes)
    return evaluate(preds, ground_truth(scenes), class_agnostic=class_agnostic)
