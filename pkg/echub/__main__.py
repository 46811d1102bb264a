from echub.app import ExperimentHub
from echub.errors import ConfigError, EchubError
from echub.version import __version__
import logging
import sys


def main(argv=None):
    if sys.version_info < (3, 8):
        print("echub {} requires python 3.8 or above".format(__version__))
        return 1

    try:
        hub = ExperimentHub(argv)
        logging.basicConfig(level=logging.DEBUG if getattr(hub.args, "debug", False)
                            else logging.INFO,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return hub.run()
    except ConfigError as e:
        sys.stderr.write("echub: configuration error: %s\n" % e)
        return 2
    except EchubError as e:
        sys.stderr.write("echub: %s: %s\n" % (type(e).__name__, e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
