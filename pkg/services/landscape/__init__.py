# Vicinity scan, removal radius, feature export and BatchNorm domain shift
from services.landscape.plans import GridSpec, DirectionPair, LandscapeGrid
from services.landscape.handler import (
    adversarial_direction, finetune_direction, direction_pair, neighbor, scan,
    origin_deviation, removal_radius, write_grid
)
from services.landscape.embeddings import export_embeddings, write_embeddings
from services.landscape.shift import bn_domain_shift, shift_summary, write_shift
