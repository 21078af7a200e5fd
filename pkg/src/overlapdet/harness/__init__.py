"""Synthetic benchmark, toy decoder, and training loop."""
from overlapdet.harness.decoder import (CategoryQueryLibrary, LayerParams, decoder_layer,
                                        encoder_proposals)
from overlapdet.harness.scene import (Scene, SceneObject, SceneSpec, bilinear_sample,
                                      generate_scene, make_scenes, micro_scene)
from overlapdet.harness.training import (TrainConfig, TrainingDiverged, build_scenes, evaluate,
                                         init_params, train)

__all__ = [
    "CategoryQueryLibrary", "LayerParams", "decoder_layer", "encoder_proposals",
    "Scene", "SceneObject", "SceneSpec", "bilinear_sample", "generate_scene", "make_scenes",
    "micro_scene",
    "TrainConfig", "TrainingDiverged", "build_scenes", "evaluate", "init_params", "train",
]
