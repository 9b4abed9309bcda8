first = 1; second = 2
items = []
items[0] = 3
obj = object()
obj.attr = 4
[p, q] = [5, 6]
(r, *rest) = (7, 8, 9)
