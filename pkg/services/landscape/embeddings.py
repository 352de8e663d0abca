"""Penultimate-layer feature table for external projection tools."""
from shared.errors import ValidationError
from shared.utils import write_csv
from services.engine.network import features

TAGS = ('clean', 'watermark')


def export_embeddings(model, clean_data, wm_data):
    """Returns (header, rows); one row per sample: tag, label, f0..f{d-1}."""
    rows = []
    width = None
    for tag, dataset in zip(TAGS, (clean_data, wm_data)):
        if dataset is None:
            continue
        table = features(model, dataset.images)
        if width is None:
            width = table.shape[1]
        elif table.shape[1] != width:
            raise ValidationError("Feature width differs between clean and watermark samples")
        for label, vector in zip(dataset.labels, table):
            rows.append([tag, int(label)] + [float(v) for v in vector])
    if width is None:
        raise ValidationError("No samples to embed")
    header = ['tag', 'label'] + [f'f{i}' for i in range(width)]
    return header, rows


def write_embeddings(model, clean_data, wm_data, path):
    header, rows = export_embeddings(model, clean_data, wm_data)
    return write_csv(path, header, rows)
