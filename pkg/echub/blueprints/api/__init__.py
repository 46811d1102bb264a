'''
API blueprint

This blueprint provides the read-only /api interface over the run index.

'''

from flask import Blueprint
from . import runs
from . import reports

blueprint = Blueprint('api', __name__)

endpoints = [
    runs.ApiEndpoint(blueprint),
    reports.ApiEndpoint(blueprint)
]
