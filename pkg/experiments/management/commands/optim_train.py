# experiments/management/commands/optim_train.py

from experiments.forms import OptimTrainForm
from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Loss trajectories of AdamW with FP8 optimizer states and FP8 activations"
    form_class = OptimTrainForm
    sweep_name = 'optim_train'

    def add_experiment_arguments(self, parser):
        parser.add_argument('--task', choices=['quadratic', 'regression', 'both'])
        parser.add_argument('--policy', help="Quantized slot policy, e.g. E4M3+Expand/E4M3+Expand")
        parser.add_argument('--group-size', help="Optimizer group size")
        parser.add_argument('--steps', help="AdamW steps on the quadratic bowl")
        parser.add_argument('--regression-steps', help="AdamW steps of the layer regression")
        parser.add_argument('--lr', help="Learning rate")
        parser.add_argument('--hidden', help="Hidden size of the regression layer")
        parser.add_argument('--seq-len', help="Tokens per regression sample")
