from pipeline.management.base import PipelineCommand
from pipeline.services import run_gradcheck_stage


class Command(PipelineCommand):
    help = 'Check every analytic gradient against finite differences.'
    stage = staticmethod(run_gradcheck_stage)
