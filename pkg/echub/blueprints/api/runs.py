'''
This provides the view functions for the /api/runs endpoints
'''

import flask
from flask import current_app


class ApiEndpoint(object):
    def __init__(self, blueprint):
        blueprint.add_url_rule("/runs/", view_func=self.get_runs)
        blueprint.add_url_rule("/runs/<run_id>", view_func=self.get_run)
        blueprint.add_url_rule("/runs/<run_id>/epochs", view_func=self.get_epochs)

    def get_runs(self):
        rundb = current_app.rundb

        query_pattern = flask.request.args.get('pattern', "*").strip()
        loss_mode = flask.request.args.get('loss_mode', "*").strip()
        runs = rundb.get_runs(query_pattern, loss_mode)
        for run in runs:
            run["api_run_url"] = flask.url_for(".get_run", run_id=run["run_id"])
        return flask.jsonify(runs=runs)

    def get_run(self, run_id):
        manifest = current_app.rundb.get_run(run_id)
        if manifest is None:
            current_app.logger.warning("no run %s", run_id)
            flask.abort(404)
        return flask.jsonify(run_id=run_id, manifest=manifest,
                             epochs_url=flask.url_for(".get_epochs", run_id=run_id))

    def get_epochs(self, run_id):
        rundb = current_app.rundb
        if rundb.get_run(run_id) is None:
            flask.abort(404)
        return flask.jsonify(run_id=run_id, epochs=rundb.get_epochs(run_id))
