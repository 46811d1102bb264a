from echub.blueprints.api import blueprint as api
