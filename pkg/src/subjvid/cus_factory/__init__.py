from .backends import Captioner, DepthEstimator, ProceduralOracle, Segmenter, SubprocessBackend
from .captions import PREFIX, CaptionRecord, LabeledCaption, build_caption, rewrite_caption, strip_labels, unlabeled_caption
from .pipeline import (
    CONTROL_TASKS,
    IDENTITY_DRAW,
    TASKS,
    AugmentedSubject,
    EmitConfig,
    FilterConfig,
    Sample,
    SubjectTrack,
    augment_subject,
    background_pool,
    draw_augmentation,
    emit_samples,
    filter_subjects,
    place_background,
    recolor,
    shift_hue,
)
from .scene import RenderedScene, SceneSpec, SubjectSpec, random_scene_spec, render_scene
from .storage import DataConfig, Dataset, SampleManifest, generate_dataset, read_shard, scene_samples
