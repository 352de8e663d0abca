# Watermark samples, watermarked datasets and WSR/BA metrics
from services.watermark.datasets import (
    LabeledDataset, make_shapes, load_idx_dataset, load_image_dir, split_owner_attacker
)
from services.watermark.triggers import (
    WatermarkSpec, ContentTrigger, NoiseTrigger, UnrelatedTrigger, Watermarker,
    apply_watermark, build_watermarked_trainset, build_watermark_testset
)
from services.watermark.metrics import wsr, benign_accuracy, per_class_accuracy
