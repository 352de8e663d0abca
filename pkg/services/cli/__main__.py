import argparse
import sys

from shared import __version__
from services.cli.handler import (
    cmd_attack, cmd_evaluate, cmd_landscape, cmd_pipeline, cmd_report, cmd_shift, cmd_train
)

COMMANDS = {
    'train': (cmd_train, "Embed the watermark and write the checkpoint"),
    'attack': (cmd_attack, "Run every configured removal attack on a checkpoint"),
    'evaluate': (cmd_evaluate, "BA, WSR and per-class accuracy of a checkpoint"),
    'landscape': (cmd_landscape, "Scan WSR/BA around a checkpoint"),
    'shift': (cmd_shift, "Clean vs watermark BatchNorm statistics gap"),
    'pipeline': (cmd_pipeline, "train, attack, evaluate and landscape in one process"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog='wmlab', description="Backdoor-watermark robustness lab")
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)
    for name, (func, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--config', required=True, help="Experiment config (JSON)")
        p.add_argument('--out', help="Output directory (overrides the config)")
        p.add_argument('--seed', type=int, help="Global seed (overrides the config)")
        if name not in ('train', 'pipeline'):
            p.add_argument('--checkpoint', help="Checkpoint path (default <out>/model.wmck)")
        p.set_defaults(func=func, checkpoint=None)

    report = sub.add_parser('report', help="Summary table over run manifests")
    report.add_argument('manifests', nargs='+', help="manifest.json files or run directories")
    report.add_argument('--out', help="Directory for summary.csv")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == '__main__':
    sys.exit(main())
