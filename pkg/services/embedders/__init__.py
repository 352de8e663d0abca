# Watermark embedding procedures: vanilla, EW, CW and APP with c-BN
from services.embedders.plans import TrainPlan, TrainReport, EvalSets
from services.embedders.reweight import ew_reweight, ew_model
from services.embedders.smoothing import cw_gradient
from services.embedders.handler import (
    train_vanilla, pretrain_clean, train_ew, train_cw, train_app, app_gradient, embed
)
