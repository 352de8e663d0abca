# Watermark-removal attacks: fine-tuning, fine-pruning and ANP-lite
from services.attacks.plans import AttackPlan, AttackReport
from services.attacks.handler import (
    attack_ft, attack_fp, attack_anp, channel_activations, channel_sensitivity, run_attack
)
