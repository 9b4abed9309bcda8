"""Entry point."""
import os
from pkg.models import User

DEBUG = False
VERSION = "1.0"


def main(argv):
    user = User(argv[0])
    return user.greet()


if __name__ == "__main__":
    LOCAL = 1
    main(os.sys.argv)
