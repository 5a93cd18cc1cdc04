from dualseg.data.coco import CocoDataset, load_coco, predictions_to_results, results_to_predictions, write_dataset
from dualseg.data.depth import IngestionError, load_depth, normalize_depth, replicate3
from dualseg.data.instances import semantic_to_instances
from dualseg.data.synthetic import Scene, generate_scene, make_dataset

__all__ = [
    "CocoDataset",
    "IngestionError",
    "Scene",
    "generate_scene",
    "load_coco",
    "load_depth",
    "make_dataset",
    "normalize_depth",
    "predictions_to_results",
    "replicate3",
    "results_to_predictions",
    "semantic_to_instances",
    "write_dataset",
]
