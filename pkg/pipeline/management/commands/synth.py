from pipeline.management.base import PipelineCommand
from pipeline.services import run_synth


class Command(PipelineCommand):
    help = 'Synthesize the multi-source scene corpus.'
    stage = staticmethod(run_synth)
