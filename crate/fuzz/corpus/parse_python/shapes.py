class Shape:
    """A shape."""
    sides = 0
    name: str = "shape"

    def __init__(self, scale):
        self.scale = scale

    def area(self):
        raise NotImplementedError

    @property
    def label(self):
        return self.name

    class Meta:
        ordering = 1


class Square(Shape):
    sides = 4

    def area(self):
        return self.scale ** 2
