# nothing here
import sys
