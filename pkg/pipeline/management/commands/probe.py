from pipeline.management.base import PipelineCommand
from pipeline.services import run_probe


class Command(PipelineCommand):
    help = 'Linear-probe the pretrained and random-init encoders.'
    stage = staticmethod(run_probe)
